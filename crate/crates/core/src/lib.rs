//! Numerics for defective Galton-Watson processes: finite-support
//! defective reproduction laws, their generating-function iteration and
//! absorption laws, the limit objects governing survival asymptotics,
//! explicit theta-branching families with closed-form iterates, and
//! seedable Monte Carlo simulation of the chain on `{0, 1, ...} ∪ {Δ}`.

pub mod limit;
pub mod pgf;
pub mod series;
pub mod stats;

pub use limit::{HFunction, LimitError, RFunction, TailAsymptotics};
pub use pgf::{AbsorptionSplit, DefectivePgf, DerivedParams, PgfError, TransitionRow};
pub use series::{SeriesError, TruncatedSeries};
pub use stats::{chi_square_two_sample, ChiSquareTest, Histogram, MomentAccumulator};
