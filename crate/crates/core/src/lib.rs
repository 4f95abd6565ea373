//! Multivariate heavy-tailed series modelling: a recurrent network for the
//! conditional mean, a peaks-over-threshold generalized Pareto model for the
//! residual tails, rolling point and high-quantile forecasts, and
//! Value-at-Risk backtests. Also ships the synthetic generators (VAR with
//! skewed-t noise, R-vine copula AR-GARCH) and a least-squares VAR benchmark.

pub mod panel;
pub mod rnn;
pub mod evt;
pub mod simgen;
pub mod stats;
pub mod backtest;
pub mod baseline;
pub mod select;
pub mod forecast;
