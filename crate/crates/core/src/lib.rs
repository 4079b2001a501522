//! Grid user management.
//!
//! VO registries enroll users through registrars and feed projected
//! records up a tier of registration authorities. Site daemons pull
//! membership over mutually authenticated channels and reconcile it into
//! local accounts, role groups and the gatekeeper's grid-mapfile.

pub mod block;
pub mod domain;
pub mod feedup;
pub mod gridmap;
pub mod journal;
pub mod policy;
pub mod provision;
pub mod registry;
pub mod sim;
pub mod store;
pub mod sync;
pub mod transport;
