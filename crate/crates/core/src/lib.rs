//! Feedback-driven data preparation for scale-balanced detector training.
//!
//! A trainer reports per-scale losses after each iteration. The
//! [`controller`] turns them into a regular/collage decision for the next
//! iteration, the [`scheduler`] picks concrete image ids, and the
//! [`collage`] engine stitches down-scaled images and rewrites their boxes.

pub mod collage;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod plot;
pub mod scheduler;
pub mod service;
pub mod simulator;

pub use collage::{
    canvas_for, compose_collage, filter_tiny, plan_collage, transform_annotations, CellAssignment,
    CollageK, CollagePlan, CollageResult, PixelBuffer, TINY_BOX_AREA,
};
pub use controller::{
    compute_ratio, decide, BatchComposition, Controller, ControllerConfig, Decision, LossReport,
    Mode, Strategy,
};
pub use dataset::{
    dataset_scale_stats, load_annotations, parse_annotations, AnnotationId, CategoryId, Dataset,
    ImageId, ImageRecord, InstanceAnnotation, ScaleStats,
};
pub use error::{
    CollageError, ControllerError, DatasetError, GeometryError, SchedulerError, ServiceError,
    SimError,
};
pub use geometry::{classify_scale, BoundingBox, PerScale, ScaleClass};
pub use scheduler::{BatchPlan, Sampler};
pub use service::{Hello, LossReportMsg, PlanMsg, Service, ServiceOptions, StatsMsg, WireMessage};
pub use simulator::{
    run_simulation, SimConfig, SimPolicy, SimReport, SurrogateParams, SyntheticSpec,
};
