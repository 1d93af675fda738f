//! Option-chain ingestion, put-call-parity forwards and quote cleaning.
//!
//! Input files are comma-separated with the header
//! `quote_date,underlying,kind,expiry,strike,bid,ask,last,volume,open_interest`
//! (ISO dates; empty bid, ask or last allowed). Cleaned files append
//! `forward,implied_vol`; rejection counts go to a `key=value` sidecar.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::implied_vol::{implied_vol, VolQuote};
use crate::spx::{OptionKind, RateCurve};

const DATE_FORMAT: &str = "%Y-%m-%d";
const COLUMNS: [&str; 10] =
    ["quote_date", "underlying", "kind", "expiry", "strike", "bid", "ask", "last", "volume", "open_interest"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Underlying {
    Spx,
    Vix,
}

impl std::str::FromStr for Underlying {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spx" => Ok(Underlying::Spx),
            "vix" => Ok(Underlying::Vix),
            other => Err(Error::InvalidParameter(format!("unknown underlying '{other}'"))),
        }
    }
}

impl std::fmt::Display for Underlying {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Underlying::Spx => "spx",
            Underlying::Vix => "vix",
        })
    }
}

/// One row of an option chain.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionQuote {
    pub quote_date: NaiveDate,
    pub underlying: Underlying,
    pub kind: OptionKind,
    pub expiry: NaiveDate,
    pub strike: f64,
    pub bid: Option<f64>,
    pub ask: Option<f64>,
    pub last: Option<f64>,
    pub volume: u64,
    pub open_interest: u64,
}

impl OptionQuote {
    /// Year fraction to expiry, ACT/365.
    pub fn expiry_tau(&self) -> f64 {
        year_fraction(self.quote_date, self.expiry)
    }

    /// Mid price, or the last trade when either side is missing.
    pub fn price(&self) -> Option<f64> {
        match (self.bid, self.ask) {
            (Some(b), Some(a)) => Some(0.5 * (b + a)),
            _ => self.last,
        }
    }
}

/// ACT/365 year fraction between two dates.
pub fn year_fraction(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / 365.0
}

/// CSV dialect of chain files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormatConfig {
    pub delimiter: u8,
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig { delimiter: b',' }
    }
}

/// Reads a chain file; see [`parse_chain`].
pub fn load_chain(path: impl AsRef<Path>, cfg: &FormatConfig) -> Result<Vec<OptionQuote>> {
    let file =
        std::fs::File::open(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_chain(file, cfg)
}

/// Parses chain rows. The header is line 1; errors name the line and column.
///
/// Extra columns (such as those of a cleaned file) are ignored.
pub fn parse_chain(reader: impl Read, cfg: &FormatConfig) -> Result<Vec<OptionQuote>> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(cfg.delimiter).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(1, "header", e))?.clone();
    let index = column_index(&header, &COLUMNS)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_error(line, "row", e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        out.push(parse_quote(line, &Row { record: &record, index: &index })?);
    }
    Ok(out)
}

fn csv_error(line: u64, column: &str, e: csv::Error) -> Error {
    Error::Parse { line, column: column.into(), message: e.to_string() }
}

fn column_index(header: &csv::StringRecord, names: &[&'static str]) -> Result<BTreeMap<&'static str, usize>> {
    names
        .iter()
        .map(|&name| {
            header.iter().position(|h| h.eq_ignore_ascii_case(name)).map(|i| (name, i)).ok_or_else(|| Error::Parse {
                line: 1,
                column: name.into(),
                message: "missing column".into(),
            })
        })
        .collect()
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    index: &'a BTreeMap<&'static str, usize>,
}

impl<'a> Row<'a> {
    fn field(&self, name: &str) -> &'a str {
        self.index.get(name).and_then(|&i| self.record.get(i)).unwrap_or("")
    }
}

fn parse_quote(line: u64, row: &Row) -> Result<OptionQuote> {
    let field = |name: &str| row.field(name);
    let err = |column: &str, message: String| Error::Parse { line, column: column.into(), message };
    let date = |column: &str| {
        NaiveDate::parse_from_str(field(column), DATE_FORMAT)
            .map_err(|e| err(column, format!("invalid date '{}': {e}", field(column))))
    };
    let number = |column: &str| -> Result<f64> {
        let raw = field(column);
        raw.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(column, format!("invalid number '{raw}'")))
    };
    let optional = |column: &str| -> Result<Option<f64>> {
        if field(column).is_empty() {
            return Ok(None);
        }
        let x = number(column)?;
        if x < 0.0 {
            return Err(err(column, format!("negative price {x}")));
        }
        Ok(Some(x))
    };
    let count = |column: &str| -> Result<u64> {
        let raw = field(column);
        raw.parse::<u64>().map_err(|_| err(column, format!("invalid count '{raw}'")))
    };
    let quote_date = date("quote_date")?;
    let underlying = field("underlying").parse::<Underlying>().map_err(|e| err("underlying", e.to_string()))?;
    let kind = field("kind").parse::<OptionKind>().map_err(|e| err("kind", e.to_string()))?;
    let expiry = date("expiry")?;
    if expiry <= quote_date {
        return Err(err("expiry", format!("expiry {expiry} is not after quote date {quote_date}")));
    }
    let strike = number("strike")?;
    if strike <= 0.0 {
        return Err(err("strike", format!("strike must be positive, got {strike}")));
    }
    Ok(OptionQuote {
        quote_date,
        underlying,
        kind,
        expiry,
        strike,
        bid: optional("bid")?,
        ask: optional("ask")?,
        last: optional("last")?,
        volume: count("volume")?,
        open_interest: count("open_interest")?,
    })
}

/// Put-call-parity forward `K* + (C - P) / discount` at the strike minimising `|C - P|`.
///
/// Quotes are assumed to share one expiry. Duplicate rows do not change the
/// result; ties in `|C - P|` go to the lowest strike.
pub fn extract_forward(quotes: &[OptionQuote], discount: f64) -> Result<f64> {
    if !(discount > 0.0) {
        return Err(Error::InvalidParameter(format!("discount must be positive, got {discount}")));
    }
    let mut sides: BTreeMap<u64, (f64, Option<f64>, Option<f64>)> = BTreeMap::new();
    for q in quotes {
        let Some(price) = q.price() else { continue };
        let entry = sides.entry(q.strike.to_bits()).or_insert((q.strike, None, None));
        let slot = match q.kind {
            OptionKind::Call => &mut entry.1,
            OptionKind::Put => &mut entry.2,
        };
        slot.get_or_insert(price);
    }
    let mut best: Option<(f64, f64, f64)> = None;
    let mut straddles: Vec<_> = sides.values().filter_map(|&(k, c, p)| Some((k, c?, p?))).collect();
    straddles.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (k, c, p) in straddles {
        if best.is_none_or(|(_, bc, bp)| (c - p).abs() < (bc - bp).abs()) {
            best = Some((k, c, p));
        }
    }
    let (k, c, p) = best.ok_or(Error::NoStraddle)?;
    Ok(k + (c - p) / discount)
}

/// Forward per expiry for one underlying; expiries without a straddle are skipped.
pub fn extract_forwards(quotes: &[OptionQuote], rates: &RateCurve) -> BTreeMap<NaiveDate, f64> {
    let mut by_expiry: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
    for q in quotes {
        by_expiry.entry(q.expiry).or_default().push(q.clone());
    }
    by_expiry
        .into_iter()
        .filter_map(|(expiry, qs)| {
            let disc = rates.discount(qs[0].expiry_tau());
            extract_forward(&qs, disc).ok().map(|f| (expiry, f))
        })
        .collect()
}

/// Filters and their boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanConfig {
    pub moneyness_low: f64,
    pub moneyness_high: f64,
    pub max_maturity: f64,
    pub rates: RateCurve,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig { moneyness_low: 0.75, moneyness_high: 1.25, max_maturity: 1.0, rates: RateCurve::flat(0.0) }
    }
}

/// Why a quote was dropped; the first five are the cleaning rules, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    InTheMoney,
    Moneyness,
    ZeroVolume,
    ZeroOpenInterest,
    Maturity,
    NoForward,
    NoPrice,
    ImpliedVolFailure,
}

impl RejectReason {
    pub const ALL: [RejectReason; 8] = [
        RejectReason::InTheMoney,
        RejectReason::Moneyness,
        RejectReason::ZeroVolume,
        RejectReason::ZeroOpenInterest,
        RejectReason::Maturity,
        RejectReason::NoForward,
        RejectReason::NoPrice,
        RejectReason::ImpliedVolFailure,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            RejectReason::InTheMoney => "in_the_money",
            RejectReason::Moneyness => "moneyness",
            RejectReason::ZeroVolume => "zero_volume",
            RejectReason::ZeroOpenInterest => "zero_open_interest",
            RejectReason::Maturity => "maturity",
            RejectReason::NoForward => "no_forward",
            RejectReason::NoPrice => "no_price",
            RejectReason::ImpliedVolFailure => "implied_vol_failure",
        }
    }
}

/// A retained quote with its forward and implied volatility.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanQuote {
    pub quote: OptionQuote,
    pub forward: f64,
    pub implied_vol: f64,
}

impl CleanQuote {
    pub fn vol_quote(&self) -> VolQuote {
        VolQuote {
            forward: self.forward,
            strike: self.quote.strike,
            expiry_tau: self.quote.expiry_tau(),
            implied_vol: self.implied_vol,
            kind: self.quote.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanedSurface {
    pub quote_date: Option<NaiveDate>,
    pub underlying: Option<Underlying>,
    pub forwards: BTreeMap<NaiveDate, f64>,
    pub quotes: Vec<CleanQuote>,
    pub rejects: BTreeMap<RejectReason, usize>,
}

impl CleanedSurface {
    pub fn vol_quotes(&self) -> Vec<VolQuote> {
        self.quotes.iter().map(CleanQuote::vol_quote).collect()
    }

    pub fn rejected(&self) -> usize {
        self.rejects.values().sum()
    }
}

/// First rule a quote fails, in rule order, or `None` when it is retained.
pub fn reject_reason(q: &OptionQuote, forward: Option<f64>, cfg: &CleanConfig) -> Option<RejectReason> {
    let Some(f) = forward else {
        return Some(RejectReason::NoForward);
    };
    let k = q.strike;
    let itm = match q.kind {
        OptionKind::Call => k < f,
        OptionKind::Put => k > f,
    };
    let moneyness = k / f;
    if itm {
        Some(RejectReason::InTheMoney)
    } else if moneyness < cfg.moneyness_low || moneyness > cfg.moneyness_high {
        Some(RejectReason::Moneyness)
    } else if q.volume == 0 {
        Some(RejectReason::ZeroVolume)
    } else if q.open_interest == 0 {
        Some(RejectReason::ZeroOpenInterest)
    } else if q.expiry_tau() > cfg.max_maturity {
        Some(RejectReason::Maturity)
    } else if q.price().is_none() {
        Some(RejectReason::NoPrice)
    } else {
        None
    }
}

/// Applies the cleaning rules and inverts retained prices to Black vols on `forwards`.
///
/// Quotes must share one quote date and underlying. Forwards are an input,
/// so cleaning a cleaned set with the same forwards is the identity.
pub fn clean(quotes: &[OptionQuote], forwards: &BTreeMap<NaiveDate, f64>, cfg: &CleanConfig) -> Result<CleanedSurface> {
    let quote_date = quotes.first().map(|q| q.quote_date);
    let underlying = quotes.first().map(|q| q.underlying);
    if quotes.iter().any(|q| Some(q.quote_date) != quote_date || Some(q.underlying) != underlying) {
        return Err(Error::InvalidParameter("cleaning needs a single quote date and underlying".into()));
    }
    let mut rejects: BTreeMap<RejectReason, usize> = RejectReason::ALL.iter().map(|&r| (r, 0)).collect();
    let mut kept = Vec::new();
    for q in quotes {
        let forward = forwards.get(&q.expiry).copied();
        if let Some(reason) = reject_reason(q, forward, cfg) {
            *rejects.entry(reason).or_default() += 1;
            continue;
        }
        let (f, price, tau) = (forward.unwrap_or_default(), q.price().unwrap_or_default(), q.expiry_tau());
        match implied_vol(price, f, q.strike, tau, cfg.rates.discount(tau), q.kind) {
            Ok(vol) => kept.push(CleanQuote { quote: q.clone(), forward: f, implied_vol: vol }),
            Err(_) => *rejects.entry(RejectReason::ImpliedVolFailure).or_default() += 1,
        }
    }
    let used: BTreeMap<NaiveDate, f64> = kept.iter().map(|c| (c.quote.expiry, c.forward)).collect();
    Ok(CleanedSurface { quote_date, underlying, forwards: used, quotes: kept, rejects })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Writes retained quotes in the input schema plus `forward,implied_vol`.
pub fn write_cleaned(out: impl Write, surface: &CleanedSurface) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut header: Vec<&str> = COLUMNS.to_vec();
    header.extend(["forward", "implied_vol"]);
    w.write_record(&header).map_err(io)?;
    for c in &surface.quotes {
        let q = &c.quote;
        w.write_record([
            q.quote_date.format(DATE_FORMAT).to_string(),
            q.underlying.to_string(),
            q.kind.to_string(),
            q.expiry.format(DATE_FORMAT).to_string(),
            q.strike.to_string(),
            fmt_opt(q.bid),
            fmt_opt(q.ask),
            fmt_opt(q.last),
            q.volume.to_string(),
            q.open_interest.to_string(),
            c.forward.to_string(),
            c.implied_vol.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `rule=count` lines plus `retained` and `total`.
pub fn write_rejects(mut out: impl Write, surface: &CleanedSurface) -> Result<()> {
    for reason in RejectReason::ALL {
        writeln!(out, "{}={}", reason.key(), surface.rejects.get(&reason).copied().unwrap_or(0))?;
    }
    writeln!(out, "retained={}", surface.quotes.len())?;
    writeln!(out, "total={}", surface.quotes.len() + surface.rejected())?;
    Ok(())
}

/// Reads a cleaned file back, including its forward and implied-vol columns.
pub fn parse_cleaned(reader: impl Read, cfg: &FormatConfig) -> Result<Vec<CleanQuote>> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(cfg.delimiter).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(1, "header", e))?.clone();
    let mut names = COLUMNS.to_vec();
    names.extend(["forward", "implied_vol"]);
    let index = column_index(&header, &names)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e.position().map_or(0, |p| p.line()), "row", e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = Row { record: &record, index: &index };
        let field = |name: &str| row.field(name);
        let quote = parse_quote(line, &row)?;
        let positive = |column: &str| -> Result<f64> {
            field(column).parse::<f64>().ok().filter(|x| *x > 0.0 && x.is_finite()).ok_or_else(|| Error::Parse {
                line,
                column: column.into(),
                message: format!("expected a positive number, got '{}'", field(column)),
            })
        };
        out.push(CleanQuote { forward: positive("forward")?, implied_vol: positive("implied_vol")?, quote });
    }
    Ok(out)
}

pub fn load_cleaned(path: impl AsRef<Path>, cfg: &FormatConfig) -> Result<Vec<CleanQuote>> {
    let file =
        std::fs::File::open(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_cleaned(file, cfg)
}
