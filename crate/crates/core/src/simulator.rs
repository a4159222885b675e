//! Surrogate training loop.
//!
//! There is no detector here. Each scale class has a per-instance loss that
//! decays with the number of instances of that class seen so far:
//! `base * exp(-decay * exposure) * (1 + noise * u)`, `u ~ U[-1, 1]`. The loss
//! mass reported for a batch is that per-instance loss times the number of
//! instances of the class in the batch. This is an invented toy model: it is
//! only meant to show how a data policy shifts per-scale loss proportions and
//! to drive the controller end to end.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::collage::CollageK;
use crate::controller::{
    BatchComposition, Controller, ControllerConfig, Decision, LossReport, Mode, Strategy,
    DEFAULT_TAU,
};
use crate::dataset::{AnnotationId, CategoryId, Dataset, ImageId, ImageRecord, InstanceAnnotation};
use crate::error::{ControllerError, SimError};
use crate::geometry::{classify_area, BoundingBox, ExactArea, PerScale, ScaleClass};
use crate::scheduler::Sampler;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SurrogateParams {
    pub base_loss: PerScale<f64>,
    pub decay: f64,
    pub noise: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            base_loss: PerScale::new(1.0, 1.0, 1.0),
            decay: 1e-4,
            noise: 0.05,
        }
    }
}

/// A data policy under simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimPolicy {
    Strategy(Strategy),
    /// Regular images only, with the small-object loss mass raised to the
    /// mean of the medium and large masses.
    Resampling,
}

impl fmt::Display for SimPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimPolicy::Strategy(s) => s.fmt(f),
            SimPolicy::Resampling => f.write_str("resampling"),
        }
    }
}

impl FromStr for SimPolicy {
    type Err = ControllerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("resampling") {
            Ok(SimPolicy::Resampling)
        } else {
            s.parse().map(SimPolicy::Strategy)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub policy: SimPolicy,
    pub tau: f64,
    pub k: CollageK,
    pub batch_size: usize,
    pub iters: u64,
    pub seed: u64,
    pub tiny_filter: bool,
    pub surrogate: SurrogateParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: SimPolicy::Strategy(Strategy::RegLoss),
            tau: DEFAULT_TAU,
            k: CollageK::FOUR,
            batch_size: 2,
            iters: 10_000,
            seed: 0,
            tiny_filter: false,
            surrogate: SurrogateParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimStep {
    pub iter: u64,
    pub mode: Mode,
    /// Regression-loss small proportion of this iteration, whatever the policy.
    pub r_s: Option<f64>,
    pub counts: PerScale<u64>,
    /// Exposure after this iteration's instances were added.
    pub exposure: PerScale<u64>,
    /// Per-instance loss before noise.
    pub unit_loss: PerScale<f64>,
    /// Regression loss mass reported to the controller.
    pub loss: PerScale<f64>,
}

impl SimStep {
    pub fn loss_share(&self) -> Option<PerScale<f64>> {
        let total = self.loss.total();
        (total > 0.0).then(|| self.loss.map(|v| v / total))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub seed: u64,
    pub tau: f64,
    pub steps: Vec<SimStep>,
    pub images_consumed: u64,
}

impl SimReport {
    /// Mean over iterations of the smallest scale's loss share divided by 1/3.
    /// Iterations without any loss mass are skipped.
    pub fn balance(&self) -> f64 {
        mean(self.steps.iter().filter_map(|s| {
            let share = s.loss_share()?;
            Some(share.s.min(share.m).min(share.l) * 3.0)
        }))
        .unwrap_or(0.0)
    }

    pub fn mean_r_s(&self) -> f64 {
        mean(self.steps.iter().filter_map(|s| s.r_s)).unwrap_or(0.0)
    }

    /// Fraction of iterations whose `r_s <= tau`; undefined ratios count as low.
    pub fn low_ratio_fraction(&self) -> f64 {
        let low = self
            .steps
            .iter()
            .filter(|s| s.r_s.is_none_or(|r| r <= self.tau))
            .count();
        low as f64 / self.steps.len() as f64
    }

    pub fn collage_fraction(&self) -> f64 {
        let n = self
            .steps
            .iter()
            .filter(|s| s.mode == Mode::Collage)
            .count();
        n as f64 / self.steps.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iter", "mode", "r_s", "n_s", "n_m", "n_l", "exp_s", "exp_m", "exp_l", "loss_s",
            "loss_m", "loss_l",
        ])?;
        for s in &self.steps {
            let mut row = vec![
                s.iter.to_string(),
                s.mode.to_string(),
                s.r_s.map(|r| r.to_string()).unwrap_or_default(),
            ];
            row.extend(s.counts.values().map(|v| v.to_string()));
            row.extend(s.exposure.values().map(|v| v.to_string()));
            row.extend(s.loss.values().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-image instance counts when the image is used regularly or as a collage
/// component. Crowd annotations are not counted.
struct ExposureTable {
    regular: Vec<PerScale<u64>>,
    collage: Vec<PerScale<u64>>,
    position: BTreeMap<ImageId, usize>,
}

impl ExposureTable {
    fn build(ds: &Dataset, k: CollageK, tiny_filter: bool) -> Self {
        let side = k.side();
        let tiny = ExactArea::from_px2(crate::collage::TINY_BOX_AREA);
        let mut regular = Vec::with_capacity(ds.len());
        let mut collage = Vec::with_capacity(ds.len());
        for img in ds.images() {
            let mut r = PerScale::default();
            let mut c = PerScale::default();
            for a in img.annotations.iter().filter(|a| !a.iscrowd) {
                r[a.scale()] += 1;
                let scaled = a.bbox.downscale_translate(side, 0, 0).exact_area();
                if !tiny_filter || scaled >= tiny {
                    c[classify_area(scaled)] += 1;
                }
            }
            regular.push(r);
            collage.push(c);
        }
        let position = ds
            .images()
            .iter()
            .enumerate()
            .map(|(i, img)| (img.id, i))
            .collect();
        Self {
            regular,
            collage,
            position,
        }
    }

    fn counts(&self, id: ImageId, mode: Mode) -> PerScale<u64> {
        let i = self.position[&id];
        match mode {
            Mode::Regular => self.regular[i],
            Mode::Collage => self.collage[i],
        }
    }
}

pub fn run_simulation(ds: &Dataset, cfg: &SimConfig) -> Result<SimReport, SimError> {
    if cfg.iters == 0 {
        return Err(SimError::NoIterations);
    }
    let strategy = match cfg.policy {
        SimPolicy::Strategy(s) => s,
        SimPolicy::Resampling => Strategy::AllRegular,
    };
    let mut controller = Controller::new(ControllerConfig {
        tau: cfg.tau,
        strategy,
        k: cfg.k,
        seed: cfg.seed,
    })?
    .with_trace_capacity(1);
    let mut sampler = Sampler::new(ds.image_ids(), cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0f5_ca1e);
    let table = ExposureTable::build(ds, cfg.k, cfg.tiny_filter);
    let sp = cfg.surrogate;

    let mut exposure = PerScale::<u64>::default();
    let mut decision = Decision::cold_start();
    let mut steps = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let plan = sampler.next_batch(&decision, cfg.batch_size, cfg.k)?;
        let mut counts = PerScale::<u64>::default();
        for id in plan.groups.iter().flatten() {
            counts += table.counts(*id, plan.mode);
        }

        let unit_loss = PerScale::new(
            sp.base_loss.s * (-sp.decay * exposure.s as f64).exp(),
            sp.base_loss.m * (-sp.decay * exposure.m as f64).exp(),
            sp.base_loss.l * (-sp.decay * exposure.l as f64).exp(),
        );
        let mut noisy = |c: ScaleClass| {
            let u: f64 = if sp.noise > 0.0 {
                noise_rng.random_range(-1.0..=1.0)
            } else {
                0.0
            };
            counts[c] as f64 * unit_loss[c] * (1.0 + sp.noise * u)
        };
        let mut reg = PerScale::new(
            noisy(ScaleClass::Small),
            noisy(ScaleClass::Medium),
            noisy(ScaleClass::Large),
        );
        let mut cls = PerScale::new(
            noisy(ScaleClass::Small),
            noisy(ScaleClass::Medium),
            noisy(ScaleClass::Large),
        );
        if cfg.policy == SimPolicy::Resampling {
            for losses in [&mut reg, &mut cls] {
                if losses.s > 0.0 {
                    losses.s = (losses.m + losses.l) / 2.0;
                }
            }
        }

        let report = LossReport { iter, cls, reg };
        let composition = BatchComposition { iter, counts };
        let r_s = {
            let total = reg.total();
            (total > 0.0).then(|| reg.s / total)
        };
        exposure += counts;
        steps.push(SimStep {
            iter,
            mode: plan.mode,
            r_s,
            counts,
            exposure,
            unit_loss,
            loss: reg,
        });
        decision = controller.observe(&report, &composition)?;
    }

    Ok(SimReport {
        policy: cfg.policy.to_string(),
        seed: cfg.seed,
        tau: cfg.tau,
        steps,
        images_consumed: sampler.consumed(),
    })
}

/// Parameters of a generated dataset. Each image independently contains
/// objects of a scale class with the given probability; when it does, it
/// holds between 1 and the given maximum of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub presence: PerScale<f64>,
    pub max_per_image: PerScale<u32>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Roughly COCO-shaped: ~41% small instances, small objects in ~52% of
    /// images, medium in ~71%, large in ~83%.
    pub fn coco_like() -> Self {
        Self {
            images: 2000,
            width: 640,
            height: 480,
            presence: PerScale::new(0.52, 0.71, 0.83),
            max_per_image: PerScale::new(6, 3, 2),
            seed: 0,
        }
    }

    /// Few images contain small objects at all.
    pub fn small_starved() -> Self {
        Self {
            images: 2000,
            width: 640,
            height: 480,
            presence: PerScale::new(0.2, 0.75, 0.85),
            max_per_image: PerScale::new(3, 3, 2),
            seed: 0,
        }
    }

    /// Small objects in only ~10% of images but up to six at a time; no
    /// image has more than one large object.
    pub fn small_clustered() -> Self {
        Self {
            images: 1000,
            width: 640,
            height: 480,
            presence: PerScale::new(0.1, 0.9, 0.5),
            max_per_image: PerScale::new(6, 3, 1),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn generate(&self) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut next_ann = 1u64;
        let max_side = self.width.min(self.height) as f64;
        let images = (1..=self.images as u64)
            .map(|id| {
                let mut annotations = Vec::new();
                for class in ScaleClass::ALL {
                    if !rng.random_bool(self.presence[class]) {
                        continue;
                    }
                    let n = rng.random_range(1..=self.max_per_image[class].max(1));
                    for _ in 0..n {
                        let (lo, hi) = match class {
                            ScaleClass::Small => (64.0f64, 1024.0f64),
                            ScaleClass::Medium => (1024.0, 9216.0),
                            ScaleClass::Large => (9216.0, (max_side * max_side * 0.8).max(9217.0)),
                        };
                        let area = (rng.random_range(lo.ln()..hi.ln())).exp();
                        let aspect: f64 = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
                        let w = (area * aspect).sqrt().min(self.width as f64);
                        let h = (area / w).min(self.height as f64);
                        let x = rng.random_range(0.0..=(self.width as f64 - w));
                        let y = rng.random_range(0.0..=(self.height as f64 - h));
                        let Ok(bbox) = BoundingBox::new(x, y, w, h) else {
                            continue;
                        };
                        let Some(bbox) = bbox.clamp_to(self.width, self.height) else {
                            continue;
                        };
                        annotations.push(InstanceAnnotation {
                            id: AnnotationId(next_ann),
                            image_id: ImageId(id),
                            bbox,
                            category_id: CategoryId(1),
                            iscrowd: false,
                        });
                        next_ann += 1;
                    }
                }
                ImageRecord {
                    id: ImageId(id),
                    width: self.width,
                    height: self.height,
                    file_name: format!("synthetic_{id:06}.png"),
                    annotations,
                }
            })
            .collect();
        Dataset::from_parts(
            images,
            BTreeMap::from([(CategoryId(1), "object".to_string())]),
        )
        .expect("generated ids are unique")
    }
}
