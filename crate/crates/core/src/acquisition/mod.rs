//! Acquisition plans, schedules and the two engines.

pub mod engine;
pub mod plan;
pub mod schedule;
pub mod session;

pub use engine::{run_parallel, run_plan, run_sequential, AcquisitionError, Devices, EngineControl};
pub use plan::{validate_plan, AcquisitionPlan, DeviceInventory, Mode, ModalitySpec, PlanViolation, StepSpec, SweepSelect};
pub use schedule::{build_tick_schedule, TickSchedule};
pub use session::{GapKind, GapMarker, Payload, Session, SessionState, SessionSummary, TimestampedSample};
