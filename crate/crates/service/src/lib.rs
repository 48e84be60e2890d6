//! Live teaching service: a human answers contextual feature queries over
//! HTTP, calibrated features are trained at label checkpoints, and the
//! resulting models are served as point clouds for inspection.

pub mod api;
pub mod session;
pub mod teacher;

pub use api::{router, AppState};
pub use session::{Event, ModelStatus, SessionLog};
pub use teacher::{QueryView, StateView, Teacher, TeacherConfig, CHECKPOINTS, QUERIES_PER_SESSION};
