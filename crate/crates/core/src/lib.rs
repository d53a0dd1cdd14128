//! Synthesis of transition probabilities and event-insertion strategies that
//! make a stochastic discrete-event system current-state opaque while keeping
//! a reachability objective attainable.

pub mod dot;
pub mod gp;
pub mod model;
pub mod observer;
pub mod opacity;
pub mod pmdp;
pub mod posy;
pub mod sim;
pub mod synthesis;

pub use model::Psdes;
pub use observer::{Observer, SafeObserver};
pub use pmdp::{InsertionPmdp, InsertionPolicy};
pub use posy::{ParamId, Posynomial, Valuation};
pub use sim::{SimConfig, SimReport};
pub use synthesis::{Scheduler, SynthesisResult, SynthesisSpec, VerificationReport};
