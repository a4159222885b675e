//! Feedback controller.
//!
//! After every training iteration the trainer reports per-scale loss sums.
//! The controller turns them into the small-object loss proportion `r_s` and
//! picks the data mode of the next iteration: collage when `r_s <= tau`,
//! regular otherwise.
//!
//! Loss attribution contract for trainers: each positive-sample loss term is
//! credited to the scale class of its matched ground-truth box. Background and
//! negative-sample losses are left out of the report.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collage::CollageK;
use crate::error::ControllerError;
use crate::geometry::{PerScale, ScaleClass};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_RANDOM_P: f64 = 0.5;

/// How the next iteration's data mode is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Strategy {
    AllRegular,
    AllCollage,
    /// Collage with probability `p`, independent of feedback.
    Random(f64),
    /// Share of small instances in the input batch.
    InputRatio,
    ClsLoss,
    #[default]
    RegLoss,
    JointLoss,
}

impl Strategy {
    pub const ALL_NAMES: [&'static str; 7] = [
        "all-regular",
        "all-collage",
        "random",
        "input-ratio",
        "cls-loss",
        "reg-loss",
        "joint-loss",
    ];

    pub fn is_feedback(&self) -> bool {
        matches!(
            self,
            Strategy::InputRatio | Strategy::ClsLoss | Strategy::RegLoss | Strategy::JointLoss
        )
    }

    pub fn is_loss_feedback(&self) -> bool {
        matches!(
            self,
            Strategy::ClsLoss | Strategy::RegLoss | Strategy::JointLoss
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::AllRegular => f.write_str("all-regular"),
            Strategy::AllCollage => f.write_str("all-collage"),
            Strategy::Random(p) => write!(f, "random:{p}"),
            Strategy::InputRatio => f.write_str("input-ratio"),
            Strategy::ClsLoss => f.write_str("cls-loss"),
            Strategy::RegLoss => f.write_str("reg-loss"),
            Strategy::JointLoss => f.write_str("joint-loss"),
        }
    }
}

impl FromStr for Strategy {
    type Err = ControllerError;

    /// Accepts kebab, snake or camel case, e.g. `reg-loss`, `RegLoss`, `random:0.3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let norm: String = name
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        let unknown = || ControllerError::UnknownStrategy(s.to_string());
        let strategy = match (norm.as_str(), arg) {
            ("allregular", None) => Strategy::AllRegular,
            ("allcollage", None) => Strategy::AllCollage,
            ("random", None) => Strategy::Random(DEFAULT_RANDOM_P),
            ("random", Some(p)) => {
                let p: f64 = p.trim().parse().map_err(|_| unknown())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(ControllerError::ProbabilityOutOfRange(p));
                }
                Strategy::Random(p)
            }
            ("inputratio", None) => Strategy::InputRatio,
            ("clsloss", None) => Strategy::ClsLoss,
            ("regloss", None) => Strategy::RegLoss,
            ("jointloss", None) => Strategy::JointLoss,
            _ => return Err(unknown()),
        };
        Ok(strategy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Regular,
    Collage,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Regular => "regular",
            Mode::Collage => "collage",
        })
    }
}

/// Per-scale positive-sample loss sums for one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub cls: PerScale<f64>,
    pub reg: PerScale<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub iter: u64,
    pub counts: PerScale<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerConfig {
    pub tau: f64,
    pub strategy: Strategy,
    pub k: CollageK,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            strategy: Strategy::RegLoss,
            k: CollageK::FOUR,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ControllerError::TauOutOfRange(self.tau));
        }
        if let Strategy::Random(p) = self.strategy {
            if !(0.0..=1.0).contains(&p) {
                return Err(ControllerError::ProbabilityOutOfRange(p));
            }
        }
        Ok(())
    }
}

/// Mode chosen for iteration `iter`, with the ratio it was based on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub iter: u64,
    pub mode: Mode,
    pub r_s: Option<f64>,
}

impl Decision {
    /// The first iteration has no feedback and uses regular images.
    pub fn cold_start() -> Self {
        Self {
            iter: 0,
            mode: Mode::Regular,
            r_s: None,
        }
    }
}

fn check_losses(values: &PerScale<f64>) -> Result<(), ControllerError> {
    for (scale, &v) in values.iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(ControllerError::InvalidLoss {
                scale: scale.short_name(),
                value: v,
            });
        }
    }
    Ok(())
}

fn small_share(values: PerScale<f64>) -> Option<f64> {
    let total = values.total();
    (total > 0.0).then(|| values[ScaleClass::Small] / total)
}

/// Small-object proportion under `strategy`; `None` for static strategies
/// and when the batch carries no mass at all.
pub fn compute_ratio(
    report: &LossReport,
    composition: &BatchComposition,
    strategy: Strategy,
) -> Result<Option<f64>, ControllerError> {
    if report.iter != composition.iter {
        return Err(ControllerError::IterMismatch {
            report: report.iter,
            composition: composition.iter,
        });
    }
    check_losses(&report.cls)?;
    check_losses(&report.reg)?;
    let ratio = match strategy {
        Strategy::AllRegular | Strategy::AllCollage | Strategy::Random(_) => None,
        Strategy::InputRatio => small_share(composition.counts.map(|n| n as f64)),
        Strategy::ClsLoss => small_share(report.cls),
        Strategy::RegLoss => small_share(report.reg),
        Strategy::JointLoss => small_share(PerScale::new(
            report.cls.s + report.reg.s,
            report.cls.m + report.reg.m,
            report.cls.l + report.reg.l,
        )),
    };
    Ok(ratio)
}

/// Applies the threshold rule for iteration `next_iter`.
pub fn decide<R: Rng + ?Sized>(
    cfg: &ControllerConfig,
    ratio: Option<f64>,
    next_iter: u64,
    rng: &mut R,
) -> Decision {
    let mode = match cfg.strategy {
        Strategy::AllRegular => Mode::Regular,
        Strategy::AllCollage => Mode::Collage,
        Strategy::Random(p) => {
            if rng.random_bool(p) {
                Mode::Collage
            } else {
                Mode::Regular
            }
        }
        _ => match ratio {
            Some(r) if r <= cfg.tau => Mode::Collage,
            _ => Mode::Regular,
        },
    };
    Decision {
        iter: next_iter,
        mode,
        r_s: ratio,
    }
}

/// One observation: the iteration observed, its ratio, and the mode chosen
/// for the iteration after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: u64,
    pub r_s: Option<f64>,
    pub mode: Mode,
}

/// Serial state machine wrapping [`compute_ratio`] and [`decide`].
#[derive(Clone, Debug)]
pub struct Controller {
    config: ControllerConfig,
    rng: ChaCha8Rng,
    trace: VecDeque<TraceEntry>,
    trace_capacity: Option<usize>,
    last_iter: Option<u64>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            trace: VecDeque::new(),
            trace_capacity: None,
            last_iter: None,
        })
    }

    /// Keeps only the most recent `capacity` trace entries.
    pub fn with_trace_capacity(mut self, capacity: usize) -> Self {
        self.trace_capacity = Some(capacity.max(1));
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn last_iter(&self) -> Option<u64> {
        self.last_iter
    }

    pub fn trace(&self) -> &VecDeque<TraceEntry> {
        &self.trace
    }

    pub fn observe(
        &mut self,
        report: &LossReport,
        composition: &BatchComposition,
    ) -> Result<Decision, ControllerError> {
        if let Some(last) = self.last_iter {
            if report.iter <= last {
                return Err(ControllerError::OutOfOrder {
                    last,
                    got: report.iter,
                });
            }
        }
        let ratio = compute_ratio(report, composition, self.config.strategy)?;
        let decision = decide(&self.config, ratio, report.iter + 1, &mut self.rng);
        self.last_iter = Some(report.iter);
        if self
            .trace_capacity
            .is_some_and(|cap| self.trace.len() >= cap)
        {
            self.trace.pop_front();
        }
        self.trace.push_back(TraceEntry {
            iter: report.iter,
            r_s: ratio,
            mode: decision.mode,
        });
        Ok(decision)
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = TraceWriter::new(out, &self.config)?;
        for entry in &self.trace {
            w.write(entry)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Streams trace rows as CSV (`iter,r_s,mode,strategy,tau`).
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
    strategy: String,
    tau: String,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W, cfg: &ControllerConfig) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(["iter", "r_s", "mode", "strategy", "tau"])?;
        Ok(Self {
            inner,
            strategy: cfg.strategy.to_string(),
            tau: cfg.tau.to_string(),
        })
    }

    pub fn write(&mut self, e: &TraceEntry) -> csv::Result<()> {
        let r_s = e.r_s.map(|r| r.to_string()).unwrap_or_default();
        self.inner.write_record([
            e.iter.to_string().as_str(),
            &r_s,
            &e.mode.to_string(),
            &self.strategy,
            &self.tau,
        ])
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(iter: u64, reg: [f64; 3]) -> (LossReport, BatchComposition) {
        (
            LossReport {
                iter,
                cls: PerScale::default(),
                reg: PerScale::new(reg[0], reg[1], reg[2]),
            },
            BatchComposition {
                iter,
                counts: PerScale::new(1, 1, 1),
            },
        )
    }

    #[test]
    fn ratio_examples() {
        let (r, c) = report(0, [0.2, 0.8, 1.0]);
        assert_eq!(compute_ratio(&r, &c, Strategy::RegLoss).unwrap(), Some(0.1));

        let joint = LossReport {
            iter: 0,
            cls: PerScale::new(0.1, 0.4, 0.5),
            reg: PerScale::new(0.1, 0.4, 0.5),
        };
        let r = compute_ratio(&joint, &c, Strategy::JointLoss)
            .unwrap()
            .unwrap();
        assert!((r - 0.1).abs() < 1e-15);

        let counts = BatchComposition {
            iter: 0,
            counts: PerScale::new(2, 3, 5),
        };
        assert_eq!(
            compute_ratio(&LossReport::default(), &counts, Strategy::InputRatio).unwrap(),
            Some(0.2)
        );
        assert_eq!(
            compute_ratio(&joint, &c, Strategy::AllCollage).unwrap(),
            None
        );
        assert_eq!(
            compute_ratio(&LossReport::default(), &c, Strategy::RegLoss).unwrap(),
            None
        );
    }

    #[test]
    fn ratio_rejects_bad_losses() {
        let (mut r, c) = report(0, [0.2, -0.1, 1.0]);
        assert!(matches!(
            compute_ratio(&r, &c, Strategy::RegLoss),
            Err(ControllerError::InvalidLoss { scale: "m", .. })
        ));
        r.reg.m = f64::INFINITY;
        assert!(compute_ratio(&r, &c, Strategy::RegLoss).is_err());
        let (r, _) = report(3, [0.2, 0.1, 1.0]);
        assert!(matches!(
            compute_ratio(&r, &c, Strategy::RegLoss),
            Err(ControllerError::IterMismatch { .. })
        ));
    }

    #[test]
    fn threshold_rule() {
        let cfg = ControllerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mode = |r, rng: &mut ChaCha8Rng| decide(&cfg, Some(r), 1, rng).mode;
        assert_eq!(mode(0.08, &mut rng), Mode::Collage);
        assert_eq!(mode(0.10, &mut rng), Mode::Collage);
        assert_eq!(mode(0.25, &mut rng), Mode::Regular);
        assert_eq!(decide(&cfg, None, 1, &mut rng).mode, Mode::Regular);
    }

    #[test]
    fn observe_fresh_state() {
        let mut ctl = Controller::new(ControllerConfig::default()).unwrap();
        let (r, c) = report(0, [0.05, 0.5, 0.45]);
        let d = ctl.observe(&r, &c).unwrap();
        assert_eq!(d.iter, 1);
        assert_eq!(d.mode, Mode::Collage);
        assert!(matches!(
            ctl.observe(&r, &c),
            Err(ControllerError::OutOfOrder { .. })
        ));
        assert_eq!(ctl.trace().len(), 1);
    }

    #[test]
    fn all_regular_ignores_feedback() {
        let cfg = ControllerConfig {
            strategy: Strategy::AllRegular,
            ..Default::default()
        };
        let mut ctl = Controller::new(cfg).unwrap();
        let (r, c) = report(0, [0.0, 0.5, 0.5]);
        assert_eq!(ctl.observe(&r, &c).unwrap().mode, Mode::Regular);
    }

    #[test]
    fn trace_ring_capacity() {
        let mut ctl = Controller::new(ControllerConfig::default())
            .unwrap()
            .with_trace_capacity(2);
        for i in 0..5 {
            let (r, c) = report(i, [0.05, 0.5, 0.45]);
            ctl.observe(&r, &c).unwrap();
        }
        let iters: Vec<_> = ctl.trace().iter().map(|e| e.iter).collect();
        assert_eq!(iters, vec![3, 4]);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("reg-loss".parse::<Strategy>().unwrap(), Strategy::RegLoss);
        assert_eq!(
            "JointLoss".parse::<Strategy>().unwrap(),
            Strategy::JointLoss
        );
        assert_eq!(
            "input_ratio".parse::<Strategy>().unwrap(),
            Strategy::InputRatio
        );
        assert_eq!("random".parse::<Strategy>().unwrap(), Strategy::Random(0.5));
        assert_eq!(
            "random:0.25".parse::<Strategy>().unwrap(),
            Strategy::Random(0.25)
        );
        assert!("random:2".parse::<Strategy>().is_err());
        assert!("nope".parse::<Strategy>().is_err());
        for name in Strategy::ALL_NAMES {
            let s: Strategy = name.parse().unwrap();
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
    }

    #[test]
    fn config_validation() {
        let bad = ControllerConfig {
            tau: 1.5,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(ControllerError::TauOutOfRange(1.5)));
    }

    #[test]
    fn trace_csv_format() {
        let mut ctl = Controller::new(ControllerConfig::default()).unwrap();
        let (r, c) = report(0, [0.05, 0.5, 0.45]);
        ctl.observe(&r, &c).unwrap();
        let (r, c) = report(1, [0.0, 0.0, 0.0]);
        ctl.observe(&r, &c).unwrap();
        let mut buf = Vec::new();
        ctl.write_trace_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,r_s,mode,strategy,tau\n0,0.05,collage,reg-loss,0.1\n1,,regular,reg-loss,0.1\n"
        );
    }
}
