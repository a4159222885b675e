//! Line-delimited JSON service wrapping the controller and the sampler.
//!
//! A trainer opens a session with `hello`, receives the plan for iteration 0,
//! then sends one `loss_report` per iteration and receives the plan for the
//! following iteration. Every message is a single UTF-8 JSON object on its
//! own line, tagged by a mandatory `type` field. Unknown fields are ignored.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::collage::{
    canvas_for, compose_collage, plan_collage, CollageK, CollagePlan, CollageResult, PixelBuffer,
};
use crate::controller::{
    BatchComposition, Controller, ControllerConfig, Decision, LossReport, Mode, Strategy,
    TraceWriter,
};
use crate::dataset::{load_annotations, Dataset, ImageId, ImageRecord, InstanceAnnotation};
use crate::error::ServiceError;
use crate::geometry::PerScale;
use crate::imageio;
use crate::scheduler::{BatchPlan, Sampler};

/// Trace entries kept in memory per session; the CSV trace has all of them.
const TRACE_RING: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub dataset: String,
    pub batch_size: usize,
    pub k: u32,
    pub tau: f64,
    pub strategy: String,
    pub seed: u64,
    #[serde(default)]
    pub tiny_filter: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReportMsg {
    pub iter: u64,
    pub cls: PerScale<f64>,
    pub reg: PerScale<f64>,
    pub counts: PerScale<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMsg {
    pub iter: u64,
    pub mode: Mode,
    pub k: u32,
    pub groups: Vec<Vec<ImageId>>,
}

impl From<&BatchPlan> for PlanMsg {
    fn from(plan: &BatchPlan) -> Self {
        Self {
            iter: plan.iter,
            mode: plan.mode,
            k: plan.k.get(),
            groups: plan.groups.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsMsg {
    pub iter: u64,
    pub regular: u64,
    pub collage: u64,
    pub mean_r_s: Option<f64>,
    pub epoch: u64,
    pub images_consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello(Hello),
    LossReport(LossReportMsg),
    Plan(PlanMsg),
    StatsRequest {},
    Stats(StatsMsg),
    Error { reason: String },
    Bye {},
}

impl WireMessage {
    pub fn error(reason: impl Into<String>) -> Self {
        WireMessage::Error {
            reason: reason.into(),
        }
    }

    /// One NDJSON line, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Server-side collage composition into a scratch directory.
#[derive(Clone, Debug)]
pub struct ScratchConfig {
    pub images_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct ServiceOptions {
    /// Directory for per-session trace CSVs.
    pub trace_dir: Option<PathBuf>,
    pub scratch: Option<ScratchConfig>,
}

/// One trainer's session: controller, sampler and trace.
pub struct Session {
    id: u64,
    batch_size: usize,
    tiny_filter: bool,
    controller: Controller,
    sampler: Sampler,
    dataset: Arc<Dataset>,
    last_plan: u64,
    regular: u64,
    collage: u64,
    r_s_sum: f64,
    r_s_n: u64,
    trace: Option<TraceWriter<File>>,
    scratch: Option<ScratchConfig>,
}

impl Session {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn config(&self) -> &ControllerConfig {
        self.controller.config()
    }

    pub fn handle_loss_report(&mut self, msg: &LossReportMsg) -> Result<PlanMsg, ServiceError> {
        if msg.iter < self.last_plan {
            return Err(ServiceError::Replay);
        }
        if msg.iter > self.last_plan {
            return Err(ServiceError::OutOfOrder {
                expected: self.last_plan,
                got: msg.iter,
            });
        }
        let report = LossReport {
            iter: msg.iter,
            cls: msg.cls,
            reg: msg.reg,
        };
        let composition = BatchComposition {
            iter: msg.iter,
            counts: msg.counts,
        };
        let decision = self
            .controller
            .observe(&report, &composition)
            .map_err(ServiceError::Report)?;
        if let Some(r) = decision.r_s {
            self.r_s_sum += r;
            self.r_s_n += 1;
        }
        if let (Some(trace), Some(entry)) = (self.trace.as_mut(), self.controller.trace().back()) {
            if let Err(e) = trace
                .write(entry)
                .and_then(|_| trace.flush().map_err(Into::into))
            {
                log::warn!("session {}: trace write failed: {e}", self.id);
            }
        }
        self.emit(&decision)
    }

    fn emit(&mut self, decision: &Decision) -> Result<PlanMsg, ServiceError> {
        let k = self.controller.config().k;
        let plan = self
            .sampler
            .next_batch(decision, self.batch_size, k)
            .map_err(|e| ServiceError::Dataset {
                path: String::new(),
                reason: e.to_string(),
            })?;
        self.last_plan = plan.iter;
        match plan.mode {
            Mode::Regular => self.regular += 1,
            Mode::Collage => self.collage += 1,
        }
        if plan.mode == Mode::Collage {
            if let Some(scratch) = &self.scratch {
                self.write_scratch(scratch, &plan);
            }
        }
        Ok(PlanMsg::from(&plan))
    }

    pub fn stats(&self) -> StatsMsg {
        StatsMsg {
            iter: self.last_plan,
            regular: self.regular,
            collage: self.collage,
            mean_r_s: (self.r_s_n > 0).then(|| self.r_s_sum / self.r_s_n as f64),
            epoch: self.sampler.epoch(),
            images_consumed: self.sampler.consumed(),
        }
    }

    fn write_scratch(&self, scratch: &ScratchConfig, plan: &BatchPlan) {
        let dir = scratch.out_dir.join(format!("session-{}", self.id));
        if let Err(e) = fs::create_dir_all(&dir) {
            log::warn!("cannot create scratch dir {}: {e}", dir.display());
            return;
        }
        for (g, group) in plan.groups.iter().enumerate() {
            let stem = dir.join(format!("iter-{:08}-group-{g:03}", plan.iter));
            let composed = compose_group(
                &self.dataset,
                &scratch.images_dir,
                group,
                plan.k,
                self.tiny_filter,
            );
            if let Err(e) = composed.and_then(|c| write_group(&stem, &c)) {
                log::warn!("iter {} group {g}: {e}", plan.iter);
            }
        }
    }
}

/// A composed collage with its layout.
#[derive(Clone, Debug)]
pub struct ComposedGroup {
    pub plan: CollagePlan,
    pub result: CollageResult,
}

/// Loads the group's images from `images_dir` and composes them. Crowd
/// annotations are left out.
pub fn compose_group(
    dataset: &Dataset,
    images_dir: &Path,
    group: &[ImageId],
    k: CollageK,
    tiny_filter: bool,
) -> Result<ComposedGroup, Box<dyn std::error::Error + Send + Sync>> {
    let records: Vec<&ImageRecord> = group
        .iter()
        .map(|id| {
            dataset
                .image(*id)
                .ok_or_else(|| format!("unknown image {id}"))
        })
        .collect::<Result<_, _>>()?;
    let plan = plan_collage(&records, k, canvas_for(&records, k))?;
    let mut pixels: HashMap<ImageId, PixelBuffer> = HashMap::new();
    let mut annotations: HashMap<ImageId, Vec<InstanceAnnotation>> = HashMap::new();
    for rec in &records {
        pixels.insert(rec.id, imageio::load_rgb(images_dir.join(&rec.file_name))?);
        annotations.insert(
            rec.id,
            rec.annotations
                .iter()
                .filter(|a| !a.iscrowd)
                .cloned()
                .collect(),
        );
    }
    let result = compose_collage(&plan, &pixels, &annotations, tiny_filter)?;
    Ok(ComposedGroup { plan, result })
}

/// Writes `<stem>.png` and `<stem>.json` (layout and transformed annotations).
pub fn write_group(
    stem: &Path,
    group: &ComposedGroup,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    imageio::save_png(stem.with_extension("png"), &group.result.pixels)?;
    let json = serde_json::json!({
        "width": group.plan.canvas_w,
        "height": group.plan.canvas_h,
        "k": group.plan.k,
        "cells": group.plan.cells,
        "annotations": group.result.annotations,
        "dropped_tiny": group.result.dropped_tiny,
    });
    fs::write(stem.with_extension("json"), serde_json::to_vec(&json)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConnectionSummary {
    pub plans: u64,
    pub errors: u64,
}

/// Shared state for all connections: options, a dataset cache and session ids.
pub struct Service {
    options: ServiceOptions,
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
    next_session: AtomicU64,
}

impl Service {
    pub fn new(options: ServiceOptions) -> Self {
        Self {
            options,
            datasets: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
        }
    }

    /// Registers an already-loaded dataset under `name`, the value a `hello`
    /// must carry in its `dataset` field to use it.
    pub fn with_dataset(self, name: impl Into<String>, dataset: Arc<Dataset>) -> Self {
        self.datasets
            .lock()
            .expect("dataset cache poisoned")
            .insert(name.into(), dataset);
        self
    }

    fn dataset(&self, path: &str) -> Result<Arc<Dataset>, ServiceError> {
        let mut cache = self.datasets.lock().expect("dataset cache poisoned");
        if let Some(ds) = cache.get(path) {
            return Ok(Arc::clone(ds));
        }
        let ds = Arc::new(load_annotations(path).map_err(|e| ServiceError::Dataset {
            path: path.to_string(),
            reason: e.to_string(),
        })?);
        cache.insert(path.to_string(), Arc::clone(&ds));
        Ok(ds)
    }

    /// Validates `hello`, opens a session and returns it with the cold-start plan.
    pub fn start_session(&self, hello: &Hello) -> Result<(Session, PlanMsg), ServiceError> {
        if !(0.0..=1.0).contains(&hello.tau) {
            return Err(ServiceError::TauOutOfRange);
        }
        let k = CollageK::new(hello.k).map_err(|_| ServiceError::BadK)?;
        if hello.batch_size == 0 {
            return Err(ServiceError::BadBatchSize);
        }
        let strategy: Strategy = hello.strategy.parse().map_err(ServiceError::Strategy)?;
        let config = ControllerConfig {
            tau: hello.tau,
            strategy,
            k,
            seed: hello.seed,
        };
        let controller = Controller::new(config)
            .map_err(ServiceError::Strategy)?
            .with_trace_capacity(TRACE_RING);
        let dataset = self.dataset(&hello.dataset)?;
        let needed = hello.batch_size * k.get() as usize;
        if dataset.len() < needed {
            return Err(ServiceError::DatasetTooSmall {
                available: dataset.len(),
                needed,
            });
        }

        let id = self.next_session.fetch_add(1, Ordering::Relaxed);
        let trace = self.options.trace_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("session-{id}.csv"));
            let opened = fs::create_dir_all(dir)
                .and_then(|_| File::create(&path))
                .map_err(csv::Error::from)
                .and_then(|f| TraceWriter::new(f, &config));
            match opened {
                Ok(mut w) => {
                    let _ = w.flush();
                    Some(w)
                }
                Err(e) => {
                    log::warn!("cannot open trace {}: {e}", path.display());
                    None
                }
            }
        });
        let mut session = Session {
            id,
            batch_size: hello.batch_size,
            tiny_filter: hello.tiny_filter,
            controller,
            sampler: Sampler::new(dataset.image_ids(), hello.seed),
            dataset,
            last_plan: 0,
            regular: 0,
            collage: 0,
            r_s_sum: 0.0,
            r_s_n: 0,
            trace,
            scratch: self.options.scratch.clone(),
        };
        let plan = session.emit(&Decision::cold_start())?;
        log::info!(
            "session {id}: strategy={} tau={} k={} batch_size={}",
            strategy,
            hello.tau,
            k,
            hello.batch_size
        );
        Ok((session, plan))
    }

    /// Handles one message; returns the reply and whether the connection ends.
    pub fn dispatch(&self, session: &mut Option<Session>, msg: WireMessage) -> (WireMessage, bool) {
        let reply = match msg {
            WireMessage::Hello(hello) => {
                if session.is_some() {
                    Err(ServiceError::SessionActive)
                } else {
                    self.start_session(&hello).map(|(s, plan)| {
                        *session = Some(s);
                        WireMessage::Plan(plan)
                    })
                }
            }
            WireMessage::LossReport(report) => match session.as_mut() {
                Some(s) => s.handle_loss_report(&report).map(WireMessage::Plan),
                None => Err(ServiceError::NoSession),
            },
            WireMessage::StatsRequest {} => match session.as_ref() {
                Some(s) => Ok(WireMessage::Stats(s.stats())),
                None => Err(ServiceError::NoSession),
            },
            WireMessage::Bye {} => return (WireMessage::Bye {}, true),
            WireMessage::Plan(_) => Err(ServiceError::Unexpected("plan")),
            WireMessage::Stats(_) => Err(ServiceError::Unexpected("stats")),
            WireMessage::Error { .. } => Err(ServiceError::Unexpected("error")),
        };
        (
            reply.unwrap_or_else(|e| WireMessage::error(e.to_string())),
            false,
        )
    }

    /// Runs one session over a line stream until `bye` or end of input.
    pub fn serve_connection<R: BufRead, W: Write>(
        &self,
        reader: R,
        mut writer: W,
    ) -> io::Result<ConnectionSummary> {
        let mut session = None;
        let mut summary = ConnectionSummary::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (reply, done) = match WireMessage::from_line(&line) {
                Ok(msg) => self.dispatch(&mut session, msg),
                Err(e) => (WireMessage::error(format!("malformed message: {e}")), false),
            };
            match &reply {
                WireMessage::Plan(plan) => {
                    summary.plans += 1;
                    log::info!(
                        "plan iter={} mode={} groups={}",
                        plan.iter,
                        plan.mode,
                        plan.groups.len()
                    );
                }
                WireMessage::Error { reason } => {
                    summary.errors += 1;
                    log::debug!("error reply: {reason}");
                }
                _ => {}
            }
            writeln!(writer, "{}", reply.to_line())?;
            writer.flush()?;
            if done {
                break;
            }
        }
        if let Some(s) = &session {
            log::info!("session {} closed after {} plans", s.id(), summary.plans);
        }
        Ok(summary)
    }

    /// Accepts connections forever, one thread and one session per connection.
    pub fn run_listener(self: Arc<Self>, listener: UnixListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let stream: UnixStream = stream?;
            let service = Arc::clone(&self);
            thread::spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(s) => BufReader::new(s),
                    Err(e) => {
                        log::warn!("connection setup failed: {e}");
                        return;
                    }
                };
                if let Err(e) = service.serve_connection(reader, stream) {
                    log::warn!("connection ended with error: {e}");
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::SyntheticSpec;

    fn service() -> Service {
        let ds = SyntheticSpec {
            images: 40,
            ..SyntheticSpec::coco_like()
        }
        .generate();
        Service::new(ServiceOptions::default()).with_dataset("mem", Arc::new(ds))
    }

    fn hello() -> Hello {
        Hello {
            dataset: "mem".into(),
            batch_size: 2,
            k: 4,
            tau: 0.1,
            strategy: "reg-loss".into(),
            seed: 7,
            tiny_filter: false,
        }
    }

    fn report(iter: u64, reg: [f64; 3]) -> LossReportMsg {
        LossReportMsg {
            iter,
            cls: PerScale::default(),
            reg: PerScale::new(reg[0], reg[1], reg[2]),
            counts: PerScale::new(1, 1, 1),
        }
    }

    #[test]
    fn cold_start_is_regular() {
        let (_, plan) = service().start_session(&hello()).unwrap();
        assert_eq!(plan.iter, 0);
        assert_eq!(plan.mode, Mode::Regular);
        assert_eq!(plan.groups.len(), 2);
    }

    #[test]
    fn hello_validation() {
        let svc = service();
        let err = |h: Hello| svc.start_session(&h).err().unwrap().to_string();
        assert_eq!(
            err(Hello {
                tau: 1.5,
                ..hello()
            }),
            "tau out of range"
        );
        assert_eq!(
            err(Hello { k: 5, ..hello() }),
            "k must be a perfect square in {1,4,9}"
        );
        assert!(err(Hello {
            strategy: "bogus".into(),
            ..hello()
        })
        .contains("unknown strategy"));
        assert!(err(Hello {
            batch_size: 11,
            ..hello()
        })
        .contains("needs 44"));
        assert!(err(Hello {
            dataset: "/nonexistent.json".into(),
            ..hello()
        })
        .starts_with("cannot load dataset"));
    }

    #[test]
    fn feedback_drives_mode() {
        let svc = service();
        let (mut s, _) = svc.start_session(&hello()).unwrap();
        let plan = s.handle_loss_report(&report(0, [0.02, 0.5, 0.48])).unwrap();
        assert_eq!((plan.iter, plan.mode), (1, Mode::Collage));
        assert!(plan.groups.iter().all(|g| g.len() == 4));
        let plan = s.handle_loss_report(&report(1, [0.5, 0.3, 0.2])).unwrap();
        assert_eq!((plan.iter, plan.mode), (2, Mode::Regular));
    }

    #[test]
    fn ordering_errors_leave_state() {
        let svc = service();
        let (mut s, _) = svc.start_session(&hello()).unwrap();
        s.handle_loss_report(&report(0, [0.5, 0.3, 0.2])).unwrap();
        assert_eq!(
            s.handle_loss_report(&report(0, [0.5, 0.3, 0.2])),
            Err(ServiceError::Replay)
        );
        assert_eq!(
            s.handle_loss_report(&report(5, [0.5, 0.3, 0.2])),
            Err(ServiceError::OutOfOrder {
                expected: 1,
                got: 5
            })
        );
        assert!(matches!(
            s.handle_loss_report(&report(1, [-0.5, 0.3, 0.2])),
            Err(ServiceError::Report(_))
        ));
        let plan = s.handle_loss_report(&report(1, [0.5, 0.3, 0.2])).unwrap();
        assert_eq!(plan.iter, 2);
        assert_eq!(s.stats().regular, 3);
    }

    #[test]
    fn wire_shapes() {
        let plan = WireMessage::Plan(PlanMsg {
            iter: 1,
            mode: Mode::Collage,
            k: 4,
            groups: vec![vec![ImageId(3), ImageId(9)]],
        });
        assert_eq!(
            plan.to_line(),
            r#"{"type":"plan","iter":1,"mode":"collage","k":4,"groups":[[3,9]]}"#
        );
        assert_eq!(WireMessage::Bye {}.to_line(), r#"{"type":"bye"}"#);
        let parsed = WireMessage::from_line(
            r#"{"type":"loss_report","iter":0,"cls":{"s":0,"m":1,"l":1},"reg":{"s":0.1,"m":1,"l":1},"counts":{"s":1,"m":2,"l":3},"extra":true}"#,
        )
        .unwrap();
        assert!(matches!(
            parsed,
            WireMessage::LossReport(LossReportMsg { iter: 0, .. })
        ));
        assert!(WireMessage::from_line(r#"{"iter":0}"#).is_err());
    }

    #[test]
    fn connection_loop() {
        let svc = service();
        let input = [
            r#"{"type":"loss_report","iter":0,"cls":{"s":0,"m":0,"l":0},"reg":{"s":0,"m":0,"l":0},"counts":{"s":0,"m":0,"l":0}}"#.to_string(),
            WireMessage::Hello(hello()).to_line(),
            "not json".into(),
            WireMessage::LossReport(report(0, [0.02, 0.5, 0.48])).to_line(),
            r#"{"type":"stats_request"}"#.into(),
            r#"{"type":"bye"}"#.into(),
            WireMessage::LossReport(report(1, [0.02, 0.5, 0.48])).to_line(),
        ]
        .join("\n");
        let mut out = Vec::new();
        let summary = svc.serve_connection(input.as_bytes(), &mut out).unwrap();
        assert_eq!(
            summary,
            ConnectionSummary {
                plans: 2,
                errors: 2
            }
        );
        let replies: Vec<WireMessage> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| WireMessage::from_line(l).unwrap())
            .collect();
        assert_eq!(replies.len(), 6);
        assert_eq!(replies[0], WireMessage::error("no active session"));
        assert!(
            matches!(&replies[2], WireMessage::Error { reason } if reason.starts_with("malformed"))
        );
        assert!(matches!(
            &replies[4],
            WireMessage::Stats(StatsMsg { collage: 1, .. })
        ));
        assert_eq!(replies[5], WireMessage::Bye {});
    }
}
