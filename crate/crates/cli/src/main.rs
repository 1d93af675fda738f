//! `svv`: batch pricing, calibration, data cleaning and validation.
//!
//! Data goes to stdout (or `--out`), diagnostics to stderr. Exit codes:
//! 0 success, 2 input error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use svv_core::{
    calibrate, clean, convergence_report, extract_forwards, implied_vol, load_chain, load_cleaned, write_cleaned,
    write_rejects, CalibrationConfig, CalibrationData, CalibrationStage, CleanConfig, ConvergenceStudy,
    CorrectionGroups, EquityMarket, EquitySlice, Error, FormatConfig, HestonParams, OptionKind, QuadratureConfig,
    RateCurve, StudyInstrument, Underlying, VixInstrument, VixSlice,
};

#[derive(Parser, Debug)]
#[command(name = "svv", version, about = "Heston with stochastic vol-of-vol: pricing, calibration and validation")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write data here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Price SPX options; emits `strike,price,implied_vol`.
    PriceSpx(PriceSpxArgs),
    /// Price the VIX future and VIX calls; emits `instrument,strike,price,implied_vol`.
    PriceVix(PriceVixArgs),
    /// Implied-volatility smile on a strike grid; emits `strike,implied_vol`.
    Smile(SmileArgs),
    /// Clean an option chain; writes the cleaned CSV and a rejection sidecar.
    CleanData(CleanArgs),
    /// Joint SPX/VIX calibration from cleaned files.
    Calibrate(CalibrateArgs),
    /// Monte Carlo convergence study of the first-order approximation.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// key=value file with kappa, m, eta_bar, rho_bar, v0 or vix0, optional r and q.
    #[arg(long)]
    params: PathBuf,
    /// key=value file with correction group parameters; missing names are zero.
    #[arg(long)]
    corrections: Option<PathBuf>,
    /// Expansion order: 0 (effective Heston) or 1 (with corrections).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    order: u8,
    /// Expiry in years.
    #[arg(long)]
    expiry: f64,
}

#[derive(Args, Debug)]
struct PriceSpxArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    spot: f64,
    /// Strikes, repeated or comma separated.
    #[arg(long = "strike", visible_alias = "strikes", value_delimiter = ',', required = true)]
    strikes: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Kind::Call)]
    kind: Kind,
}

#[derive(Args, Debug)]
struct PriceVixArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// VIX call strikes in decimal units, repeated or comma separated.
    #[arg(long = "strike", visible_alias = "strikes", value_delimiter = ',')]
    strikes: Vec<f64>,
}

#[derive(Args, Debug)]
struct SmileArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    underlying: UnderlyingArg,
    /// Strike grid `LO:HI:N` (N >= 2 equally spaced strikes).
    #[arg(long)]
    strikes_range: StrikeRange,
    /// Index level; required for SPX smiles.
    #[arg(long)]
    spot: Option<f64>,
}

#[derive(Args, Debug)]
struct CleanArgs {
    /// Raw chain CSV.
    #[arg(long)]
    input: PathBuf,
    /// Keep only this underlying (required when the chain mixes both).
    #[arg(long, value_enum)]
    underlying: Option<UnderlyingArg>,
    /// Rejection counts file (default: `<out>.rejects` or stderr).
    #[arg(long)]
    rejects: Option<PathBuf>,
    /// Flat continuously compounded rate for discounting.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.75)]
    moneyness_low: f64,
    #[arg(long, default_value_t = 1.25)]
    moneyness_high: f64,
    /// Longest retained maturity in years.
    #[arg(long, default_value_t = 1.0)]
    max_maturity: f64,
    /// Forward override `YYYY-MM-DD=F`, replacing the parity forward of that expiry.
    #[arg(long = "forward", value_parser = parse_forward)]
    forwards: Vec<(NaiveDate, f64)>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Cleaned SPX file.
    #[arg(long)]
    spx: Option<PathBuf>,
    /// Cleaned VIX file; forwards are the VIX futures.
    #[arg(long)]
    vix: Option<PathBuf>,
    /// Spot VIX in decimal units, used to pin v0.
    #[arg(long)]
    spot_vix: Option<f64>,
    /// key=value calibration config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Per-quote residual CSV.
    #[arg(long)]
    residuals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Simulated paths per (epsilon, delta) pair; even.
    #[arg(long, default_value_t = 400_000)]
    paths: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Time steps per year; must resolve the fast scale.
    #[arg(long)]
    steps_per_year: Option<f64>,
    /// Disable the Heston control variate.
    #[arg(long)]
    no_control: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Call,
    Put,
}

impl From<Kind> for OptionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Call => OptionKind::Call,
            Kind::Put => OptionKind::Put,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum UnderlyingArg {
    Spx,
    Vix,
}

impl From<UnderlyingArg> for Underlying {
    fn from(u: UnderlyingArg) -> Self {
        match u {
            UnderlyingArg::Spx => Underlying::Spx,
            UnderlyingArg::Vix => Underlying::Vix,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Heston,
    Full,
}

#[derive(Clone, Copy, Debug)]
struct StrikeRange {
    lo: f64,
    hi: f64,
    n: usize,
}

impl StrikeRange {
    fn strikes(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| if i + 1 == self.n { self.hi } else { self.lo + step * i as f64 }).collect()
    }
}

impl FromStr for StrikeRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, n] = parts.as_slice() else {
            return Err(format!("expected LO:HI:N, got '{s}'"));
        };
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}"));
        let (lo, hi) = (num(lo)?, num(hi)?);
        let n = n.trim().parse::<usize>().map_err(|e| format!("'{n}': {e}"))?;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) || n < 2 {
            return Err(format!("need 0 < LO < HI and N >= 2, got '{s}'"));
        }
        Ok(StrikeRange { lo, hi, n })
    }
}

fn parse_forward(s: &str) -> Result<(NaiveDate, f64), String> {
    let (date, value) = s.split_once('=').ok_or_else(|| format!("expected YYYY-MM-DD=F, got '{s}'"))?;
    let date = NaiveDate::parse_from_str(date.trim(), "%Y-%m-%d").map_err(|e| format!("'{date}': {e}"))?;
    let value: f64 = value.trim().parse().map_err(|e| format!("'{value}': {e}"))?;
    if !(value > 0.0 && value.is_finite()) {
        return Err(format!("forward must be positive, got {value}"));
    }
    Ok((date, value))
}

/// 2 for bad inputs, 3 for numerical failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::InfeasibleVix { .. }
        | Error::NoStraddle
        | Error::UnresolvedFastScale { .. } => 2,
        Error::PricingFailure { source, .. } => exit_code(source),
        _ => 3,
    }
}

fn input(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn read_text(path: &Path) -> svv_core::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> svv_core::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn output(out: Option<&Path>) -> svv_core::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn positive(name: &str, x: f64) -> svv_core::Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(input(format!("{name} must be positive, got {x}")))
    }
}

struct Model {
    params: HestonParams,
    groups: Option<CorrectionGroups>,
    expiry: f64,
}

impl Model {
    fn load(args: &ModelArgs) -> svv_core::Result<Self> {
        let params = HestonParams::from_key_values(&read_text(&args.params)?)?;
        let groups = match &args.corrections {
            Some(path) => CorrectionGroups::from_key_values(&read_text(path)?)?,
            None => CorrectionGroups::zero(),
        };
        let expiry = positive("expiry", args.expiry)?;
        Ok(Model { params, groups: (args.order == 1).then_some(groups), expiry })
    }

    fn groups(&self) -> Option<&CorrectionGroups> {
        self.groups.as_ref()
    }

    fn equity_slice(&self, spot: f64) -> svv_core::Result<EquitySlice> {
        let spot = positive("spot", spot)?;
        Ok(EquitySlice::from_market(&EquityMarket::flat(spot, self.params.r, self.params.q), self.expiry))
    }

    fn vix_slice(&self) -> VixSlice {
        VixSlice::new(self.expiry, self.params.r)
    }
}

fn fmt_vol(vol: Option<f64>) -> String {
    vol.map_or_else(String::new, |v| v.to_string())
}

/// Black implied vol, or `None` with a warning when the price cannot be inverted.
fn invert(price: f64, forward: f64, strike: f64, tau: f64, discount: f64, kind: OptionKind) -> Option<f64> {
    match implied_vol(price, forward, strike, tau, discount, kind) {
        Ok(v) => Some(v),
        Err(e) => {
            eprintln!("warning: no implied vol at strike {strike}: {e}");
            None
        }
    }
}

fn price_spx(args: &PriceSpxArgs, out: &mut dyn Write) -> svv_core::Result<()> {
    let model = Model::load(&args.model)?;
    let slice = model.equity_slice(args.spot)?;
    let kind = OptionKind::from(args.kind);
    let options: Vec<(f64, OptionKind)> = args.strikes.iter().map(|&k| (k, kind)).collect();
    let prices = slice.prices(&options, &model.params, model.groups(), &QuadratureConfig::equity())?;
    writeln!(out, "strike,price,implied_vol")?;
    for (&k, price) in args.strikes.iter().zip(prices) {
        let vol = invert(price, slice.forward, k, model.expiry, slice.discount, kind);
        writeln!(out, "{k},{price},{}", fmt_vol(vol))?;
    }
    Ok(())
}

fn price_vix(args: &PriceVixArgs, out: &mut dyn Write) -> svv_core::Result<()> {
    let model = Model::load(&args.model)?;
    let slice = model.vix_slice();
    let tau = model.expiry;
    let mut instruments = vec![VixInstrument::future(tau)];
    instruments.extend(args.strikes.iter().map(|&k| VixInstrument::call(k, tau)));
    let prices = slice.prices(&instruments, &model.params, model.groups(), &QuadratureConfig::vix())?;
    let future = prices[0];
    writeln!(out, "instrument,strike,price,implied_vol")?;
    writeln!(out, "future,,{future},")?;
    for (&k, &price) in args.strikes.iter().zip(&prices[1..]) {
        let vol = invert(price, future, k, tau, slice.discount, OptionKind::Call);
        writeln!(out, "call,{k},{price},{}", fmt_vol(vol))?;
    }
    Ok(())
}

fn smile(args: &SmileArgs, out: &mut dyn Write) -> svv_core::Result<()> {
    let model = Model::load(&args.model)?;
    let strikes = args.strikes_range.strikes();
    let tau = model.expiry;
    let vols: Vec<Option<f64>> = match args.underlying {
        UnderlyingArg::Spx => {
            let spot = args.spot.ok_or_else(|| input("--spot is required for an SPX smile"))?;
            let slice = model.equity_slice(spot)?;
            // out-of-the-money side of the forward
            let options: Vec<(f64, OptionKind)> = strikes
                .iter()
                .map(|&k| (k, if k < slice.forward { OptionKind::Put } else { OptionKind::Call }))
                .collect();
            let prices = slice.prices(&options, &model.params, model.groups(), &QuadratureConfig::equity())?;
            options
                .iter()
                .zip(prices)
                .map(|(&(k, kind), price)| invert(price, slice.forward, k, tau, slice.discount, kind))
                .collect()
        }
        UnderlyingArg::Vix => {
            let slice = model.vix_slice();
            let mut instruments = vec![VixInstrument::future(tau)];
            instruments.extend(strikes.iter().map(|&k| VixInstrument::call(k, tau)));
            let prices = slice.prices(&instruments, &model.params, model.groups(), &QuadratureConfig::vix())?;
            strikes
                .iter()
                .zip(&prices[1..])
                .map(|(&k, &price)| invert(price, prices[0], k, tau, slice.discount, OptionKind::Call))
                .collect()
        }
    };
    writeln!(out, "strike,implied_vol")?;
    for (k, vol) in strikes.iter().zip(vols) {
        writeln!(out, "{k},{}", fmt_vol(vol))?;
    }
    Ok(())
}

fn clean_data(args: &CleanArgs, out_path: Option<&Path>) -> svv_core::Result<()> {
    let mut quotes = load_chain(&args.input, &FormatConfig::default())?;
    match args.underlying {
        Some(u) => quotes.retain(|q| q.underlying == Underlying::from(u)),
        None => {
            if quotes.iter().any(|q| q.underlying != quotes[0].underlying) {
                return Err(input("chain mixes SPX and VIX quotes; choose one with --underlying"));
            }
        }
    }
    if !args.rate.is_finite() {
        return Err(input(format!("rate must be finite, got {}", args.rate)));
    }
    let cfg = CleanConfig {
        moneyness_low: args.moneyness_low,
        moneyness_high: args.moneyness_high,
        max_maturity: args.max_maturity,
        rates: RateCurve::flat(args.rate),
    };
    let mut forwards: BTreeMap<NaiveDate, f64> = extract_forwards(&quotes, &cfg.rates);
    forwards.extend(args.forwards.iter().copied());
    let surface = clean(&quotes, &forwards, &cfg)?;

    let mut out = output(out_path)?;
    write_cleaned(&mut out, &surface)?;
    out.flush()?;
    let sidecar = args.rejects.clone().or_else(|| out_path.map(|p| p.with_extension("rejects")));
    match sidecar {
        Some(path) => {
            let mut w = create(&path)?;
            write_rejects(&mut w, &surface)?;
            w.flush()?;
        }
        None => write_rejects(std::io::stderr().lock(), &surface)?,
    }
    eprintln!("retained {} of {} quotes", surface.quotes.len(), surface.quotes.len() + surface.rejected());
    Ok(())
}

fn run_calibrate(args: &CalibrateArgs, out: &mut dyn Write) -> svv_core::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => CalibrationConfig::from_key_values(&read_text(path)?)?,
        None => CalibrationConfig::default(),
    };
    if let Some(stage) = args.stage {
        cfg.stage = match stage {
            StageArg::Heston => CalibrationStage::HestonOnly,
            StageArg::Full => CalibrationStage::Full,
        };
    }
    if let Some(n) = args.max_iterations {
        cfg.max_iterations = n;
    }
    cfg.validate()?;
    let load = |path: &Option<PathBuf>| -> svv_core::Result<Vec<_>> {
        Ok(match path {
            Some(p) => load_cleaned(p, &FormatConfig::default())?.iter().map(|c| c.vol_quote()).collect(),
            None => Vec::new(),
        })
    };
    let data = CalibrationData { spx: load(&args.spx)?, vix: load(&args.vix)?, spot_vix: args.spot_vix };
    if data.spx.is_empty() && data.vix.is_empty() {
        return Err(input("no quotes: pass --spx and/or --vix"));
    }
    let res = calibrate(&data, &cfg)?;
    for (i, s) in res.stages.iter().enumerate() {
        eprintln!(
            "stage {}: objective {:.6e} -> {:.6e} in {} iterations{}",
            i + 1,
            s.initial_objective,
            s.objective,
            s.iterations,
            if s.converged { "" } else { " (not converged)" }
        );
    }
    if res.feller_warning {
        eprintln!("warning: calibrated parameters violate the Feller condition");
    }
    out.write_all(res.to_key_values().as_bytes())?;
    if let Some(path) = &args.residuals {
        let mut w = create(path)?;
        res.write_residuals(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn validate(args: &ValidateArgs, out: &mut dyn Write) -> svv_core::Result<()> {
    let mut study = ConvergenceStudy::reference(args.paths, args.seed)?;
    if let Some(spy) = args.steps_per_year {
        study.mc.steps_per_year = spy;
    }
    study.control = !args.no_control;
    let rows = study.run()?;
    writeln!(out, "instrument,epsilon,delta,mc_price,mc_se,order0,first_order,gap")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.instrument,
            r.epsilon,
            r.delta,
            r.mc.mean,
            r.mc.standard_error,
            r.order0,
            r.first_order,
            r.gap()
        )?;
    }
    eprint!("{}", convergence_report(&rows));
    for instr in [StudyInstrument::SpxCall, StudyInstrument::VixCall] {
        let gaps: Vec<f64> = rows.iter().filter(|r| r.instrument == instr).map(|r| r.gap()).collect();
        if let [first, .., last] = gaps.as_slice() {
            eprintln!("{instr}: gap ratio {:.3}", first / last);
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> svv_core::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| input(format!("thread pool: {e}")))?;
    }
    let out_path = cli.out.as_deref();
    if let Command::CleanData(args) = &cli.command {
        return clean_data(args, out_path);
    }
    let mut out = output(out_path)?;
    match &cli.command {
        Command::PriceSpx(args) => price_spx(args, &mut *out)?,
        Command::PriceVix(args) => price_vix(args, &mut *out)?,
        Command::Smile(args) => smile(args, &mut *out)?,
        Command::Calibrate(args) => run_calibrate(args, &mut *out)?,
        Command::Validate(args) => validate(args, &mut *out)?,
        Command::CleanData(_) => unreachable!(),
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
