//! Simulation of respiratory motion compensated needle steering with haptic
//! feedback during breath-holds.
//!
//! The crate models a breathing phantom, a surrogate motion sensor, the
//! surrogate-to-motion regression, manipulator steering, the operator-side
//! haptic handle and the protocol that ties them together.
//!
//! ```
//! use breathsteer::session::{run_protocol, Scenario};
//!
//! let mut scenario = Scenario::noiseless();
//! scenario.insertions.truncate(1);
//! let report = run_protocol(&scenario).unwrap();
//! assert!(report.is_complete());
//! assert!(report.insertions[0].error.euclidean < 0.5);
//! ```

pub mod error;
pub mod haptics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod session;
pub mod steering;
pub mod surrogate;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets stay in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantom.md")]
    mod phantom {}
    #[doc = include_str!("../../../book/src/surrogate.md")]
    mod surrogate {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/steering.md")]
    mod steering {}
    #[doc = include_str!("../../../book/src/haptics.md")]
    mod haptics {}
    #[doc = include_str!("../../../book/src/session.md")]
    mod session {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
