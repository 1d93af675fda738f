//! Pricing and calibration engine for the Heston model with stochastic
//! vol-of-vol: first-order Fourier prices for index and VIX options, a joint
//! implied-volatility calibration, market-data cleaning, and a Monte Carlo
//! oracle for the full multiscale dynamics.

// `!(x > 0.0)` style guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod correction;
pub mod error;
pub mod faddeeva;
pub mod implied_vol;
pub mod kernel;
pub mod keyvalue;
pub mod market_data;
pub mod mc;
pub mod quadrature;
pub mod spx;
pub mod vix;

pub use calibration::{
    calibrate, objective, pinned_v0, synthetic_data, weighted_objective, CalibrationConfig, CalibrationData,
    CalibrationResult, CalibrationStage, Evaluation, ParamBounds, QuoteResidual, StageReport, Theta,
};
pub use correction::{
    default_steps, equity_corrections, equity_corrections_with, solve_f_system, solve_g_system, solve_g_system_with,
    solve_hv_system, solve_hv_system_with, CorrectionGroups, EquityCorrections, SlowSystemForm, VixCorrections,
};
pub use error::{Bound, Error, Result};
pub use implied_vol::{black_price, black_vega, implied_vol, VolQuote};
pub use kernel::{cir_transform_terms, equity_cf_terms, CirTransformTerms, EquityCfTerms, HestonParams};
pub use keyvalue::{format_pairs, KeyValues};
pub use market_data::{
    clean, extract_forward, extract_forwards, load_chain, load_cleaned, parse_chain, parse_cleaned, reject_reason,
    write_cleaned, write_rejects, year_fraction, CleanConfig, CleanQuote, CleanedSurface, FormatConfig, OptionQuote,
    RejectReason, Underlying,
};
pub use mc::{
    convergence_report, group_params_from_spec, group_params_with, simulate_heston, simulate_svv, ConvergenceRow,
    ConvergenceStudy, FactorState, GaussianLaw, McConfig, McEstimate, PathSet, PoissonAverages, PoissonMethod,
    SpecGroups, StudyInstrument, SvvSpec, TerminalState,
};
pub use quadrature::{GaussLegendre, QuadratureConfig};
pub use spx::{
    call_payoff_transform, price_first_order, price_order0, price_with_market, EquityMarket, EquityOption, EquitySlice,
    OptionKind, RateCurve,
};
pub use vix::{
    price_vix_first_order, price_vix_order0, variance_from_vix, vix_contour_diagnostic, vix_from_variance,
    vix_payoff_transform, VixInstrument, VixKind, VixMapping, VixSlice, TAU0,
};
