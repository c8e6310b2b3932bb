//! Bilevel reward design for large fleets of selfish repositioning drivers.
//!
//! The lower level trains drivers with a mean-field actor-critic learner on a
//! discrete grid-world simulator ([`env`], [`nn`], [`marl`]). The upper level
//! tunes one scalar reward-design parameter (a service-charge slope or a
//! congestion toll) with Gaussian-process Bayesian optimization under an
//! upper-confidence-bound acquisition ([`bayesopt`]). [`reward`] holds the
//! charge schedules and system metrics, [`oracle`] the closed-form solution
//! of the 2×2 service-charge case, and [`ingest`] the trip/turnstile data
//! pipeline used to build city scenarios.

pub mod bayesopt;
pub mod env;
pub mod error;
pub mod ingest;
pub mod marl;
pub mod nn;
pub mod oracle;
pub mod presets;
pub mod reward;

pub use bayesopt::{BoConfig, BoOutcome, GpHyper, GpState, Posterior};
pub use env::{
    Action, DriverClass, ExperienceRecord, GridId, MeanActionMap, Observation, OrderSpec,
    Scenario, ScenarioConfig, SimState,
};
pub use error::{Error, Result};
pub use marl::{ActorGradient, BaselineMode, ConvergenceTrace, EvalConfig, EvalMode, GridBreakdown, Hyperparams, Policy};
pub use nn::{Head, Mlp};
pub use presets::CityParams;
pub use reward::{MetricsReport, ObjectiveConfig, ObjectiveKind, RewardDesign};
