//! Optimization loop: multi-view batches, view-path and structural-path
//! gradients, the level schedule and periodic pruning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cscm::HdeCache;
use crate::cvpm::{
    camera_unit, combine_decisions, cvc_loss, prune_mask, select_view_pairs, PruneContext, PruneReport,
    PruneThresholds, ViewPair,
};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{fine_loss, l1_loss, psnr, ssim, ssim_loss, SsimParams};
use crate::model::{ModelConfig, NeuralScene, SlotRef};
use crate::nn::BnMode;
use crate::optim::{Adam, AdamParams, LearningRates};
use crate::params::{Grads, ParamGroup, ParamStore};
use crate::raster::{render, render_backward, RenderSettings};
use crate::scene::{Camera, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub views_per_step: usize,
    pub seed: u64,
    /// Weight of the SSIM term against L1.
    pub lambda_ssim: f64,
    pub lambda_fine: f64,
    pub lambda_cvc: f64,
    /// Start iterations of levels 2, 3, ... on a schedule of
    /// `schedule_length` iterations, scaled to `iterations`.
    pub level_starts: Vec<u64>,
    pub schedule_length: u64,
    /// Ground-truth SSIM above which two views form a consistency pair.
    pub pair_threshold: f64,
    pub prune_every: u64,
    /// Training cameras consulted per pruning round.
    pub prune_cameras: usize,
    /// Cross-view consistency loss and pruning.
    pub cvpm: bool,
    /// Structural gradient path.
    pub svc: bool,
    pub learning_rates: LearningRates,
    pub prune: PruneThresholds,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            views_per_step: 4,
            seed: 0,
            lambda_ssim: 0.2,
            lambda_fine: 0.01,
            lambda_cvc: 0.05,
            level_starts: vec![12000, 21000],
            schedule_length: 30000,
            pair_threshold: 0.6,
            prune_every: 500,
            prune_cameras: 4,
            cvpm: true,
            svc: true,
            learning_rates: LearningRates::default(),
            prune: PruneThresholds::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.into()));
        if self.views_per_step == 0 {
            return bad("views_per_step must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return bad("lambda_ssim must lie in [0, 1]");
        }
        if !(self.lambda_fine >= 0.0 && self.lambda_cvc >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.schedule_length == 0 {
            return bad("schedule_length must be positive");
        }
        if self.level_starts.windows(2).any(|w| w[0] > w[1]) {
            return bad("level_starts must be non-decreasing");
        }
        if self.level_starts.len() + 1 < self.model.cscm.levels {
            return bad("level_starts needs one entry per level after the first");
        }
        if self.prune_every == 0 {
            return bad("prune_every must be positive");
        }
        self.model.cscm.validate()
    }
}

/// Number of active feature levels at `iteration` (1-based).
pub fn level_schedule(iteration: u64, config: &TrainConfig) -> usize {
    let total = config.iterations as u128;
    let started = config
        .level_starts
        .iter()
        .filter(|&&s| iteration as u128 * config.schedule_length as u128 >= s as u128 * total)
        .count();
    (1 + started).min(config.model.cscm.levels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    /// Index in the source dataset.
    pub index: usize,
    pub camera: Camera,
    pub image: ImageBuffer,
}

/// Loss terms summed over the views (and pairs) of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pixel: f64,
    pub ssim: f64,
    pub fine: f64,
    pub cvc: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub group: String,
    pub view: f64,
    pub structural: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepGradients {
    pub view: Grads,
    pub structural: Grads,
}

impl StepGradients {
    pub fn total(&self) -> Grads {
        let mut t = self.view.clone();
        t.add_assign(&self.structural);
        t
    }

    pub fn report(&self, store: &ParamStore) -> Vec<GroupNorm> {
        let total = self.total();
        ParamGroup::ALL
            .into_iter()
            .filter(|g| g.learnable())
            .map(|g| GroupNorm {
                group: g.name().to_string(),
                view: self.view.group_norm(store, g),
                structural: self.structural.group_norm(store, g),
                total: total.group_norm(store, g),
            })
            .collect()
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub views: Vec<usize>,
    pub active_levels: usize,
    pub loss: LossTerms,
    pub grad_norms: Vec<GroupNorm>,
    pub anchors: usize,
    pub gaussians: usize,
    /// Loss change on this batch caused by switching on a new level.
    pub activation_jump: Option<f64>,
    pub rejected_groups: Vec<String>,
    pub prune: Option<PruneReport>,
}

struct BatchPass {
    losses: LossTerms,
    grads: Option<(StepGradients, HdeCache)>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub scene: NeuralScene,
    views: Vec<TrainView>,
    pairs: Vec<ViewPair>,
    adam: Adam,
    iteration: u64,
    unit: f64,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    prune_rounds: usize,
    ssim: SsimParams,
}

fn add_scaled(dst: &mut ImageBuffer, s: f64, src: &ImageBuffer) {
    for (d, v) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * v;
    }
}

impl Trainer {
    /// Builds the neural scene from an initial point cloud.
    pub fn new(config: TrainConfig, points: &[Vec3], views: Vec<TrainView>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scene = NeuralScene::from_points(points, config.model.clone(), &mut rng)?;
        Self::with_scene(config, scene, views, rng)
    }

    pub fn from_scene(config: TrainConfig, scene: NeuralScene, views: Vec<TrainView>) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_scene(config, scene, views, rng)
    }

    fn with_scene(config: TrainConfig, mut scene: NeuralScene, views: Vec<TrainView>, rng: ChaCha8Rng) -> Result<Self> {
        if views.len() < config.views_per_step {
            return Err(Error::Usage(format!(
                "{} training views, {} needed per step",
                views.len(),
                config.views_per_step
            )));
        }
        for v in &views {
            if v.image.dims() != (v.camera.width, v.camera.height) {
                return Err(Error::DimensionMismatch(format!(
                    "view {}: camera {}x{}, image {}x{}",
                    v.index,
                    v.camera.width,
                    v.camera.height,
                    v.image.width(),
                    v.image.height()
                )));
            }
        }
        let ssim_params = SsimParams::default();
        let pairs = if config.cvpm && config.lambda_cvc > 0.0 {
            let images: Vec<ImageBuffer> = views.iter().map(|v| v.image.clone()).collect();
            select_view_pairs(&images, config.pair_threshold, &ssim_params)?
        } else {
            Vec::new()
        };
        let cameras: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
        let unit = camera_unit(&cameras).unwrap_or_else(|| scene.bounds.diagonal());
        scene.active_levels = level_schedule(0, &config);
        let adam = Adam::new(&scene.store, AdamParams::default());
        Ok(Self {
            config,
            scene,
            views,
            pairs,
            adam,
            iteration: 0,
            unit,
            rng,
            queue: Vec::new(),
            prune_rounds: 0,
            ssim: ssim_params,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn views(&self) -> &[TrainView] {
        &self.views
    }

    pub fn pairs(&self) -> &[ViewPair] {
        &self.pairs
    }

    /// Replaces the consistency pairs (indices into the training views).
    pub fn set_pairs(&mut self, pairs: Vec<ViewPair>) {
        self.pairs = pairs;
    }

    /// Distance unit for the pruning thresholds.
    pub fn unit(&self) -> f64 {
        self.unit
    }

    /// Draws distinct views from the current epoch, reshuffling when it runs
    /// out.
    fn sample_batch(&mut self) -> Vec<usize> {
        let m = self.config.views_per_step;
        let mut batch = Vec::with_capacity(m);
        while batch.len() < m {
            if self.queue.is_empty() {
                self.queue = (0..self.views.len()).collect();
                self.queue.shuffle(&mut self.rng);
            }
            let pos = self.queue.iter().rposition(|v| !batch.contains(v));
            match pos {
                Some(p) => batch.push(self.queue.remove(p)),
                None => self.queue.clear(),
            }
        }
        batch
    }

    /// Losses for `batch` (indices into the training views) at the given
    /// level count, with training-mode normalization.
    pub fn batch_loss(&self, batch: &[usize], active: usize) -> Result<LossTerms> {
        Ok(self.pass(batch, active, false, self.iteration)?.losses)
    }

    /// View and structural gradients of the batch loss.
    pub fn batch_gradients(&self, batch: &[usize], active: usize) -> Result<(LossTerms, StepGradients)> {
        let p = self.pass(batch, active, true, self.iteration)?;
        Ok((p.losses, p.grads.expect("requested").0))
    }

    fn pass(&self, batch: &[usize], active: usize, backward: bool, iteration: u64) -> Result<BatchPass> {
        let c = &self.config;
        let (l1w, ssw) = (1.0 - c.lambda_ssim, c.lambda_ssim);
        let scene = &self.scene;
        let (f_h, hde) = scene.features(active, BnMode::Train)?;
        let settings = RenderSettings::default();

        let mut terms = LossTerms::default();
        let mut rendered = Vec::with_capacity(batch.len());
        for &v in batch {
            let view = &self.views[v];
            let (gs, cache) = scene.decode_view(&f_h, &view.camera);
            let (out, state) = render(&gs, &view.camera, &settings);
            let (l1, g1) = l1_loss(&out.color, &view.image)?;
            terms.pixel += l1;
            let mut upstream = ImageBuffer::new(view.image.width(), view.image.height());
            add_scaled(&mut upstream, l1w, &g1);
            if ssw > 0.0 {
                let (ls, gs_ssim) = ssim_loss(&out.color, &view.image, &self.ssim)?;
                terms.ssim += ls;
                add_scaled(&mut upstream, ssw, &gs_ssim);
            }
            let log_scales: Vec<Vec3> = gs.iter().map(|g| g.log_scale).collect();
            let (lf, gf) = fine_loss(&log_scales);
            terms.fine += lf;
            rendered.push((gs, cache, out, state, upstream, gf));
        }
        for pair in &self.pairs {
            let (Some(a), Some(b)) = (
                batch.iter().position(|&v| v == pair.i),
                batch.iter().position(|&v| v == pair.j),
            ) else {
                continue;
            };
            let (val, gi, gj) = cvc_loss(
                pair,
                &self.views[pair.i].image,
                &self.views[pair.j].image,
                &rendered[a].2.color,
                &rendered[b].2.color,
            )?;
            terms.cvc += val;
            add_scaled(&mut rendered[a].4, c.lambda_cvc, &gi);
            add_scaled(&mut rendered[b].4, c.lambda_cvc, &gj);
        }
        terms.total = l1w * terms.pixel + ssw * terms.ssim + c.lambda_fine * terms.fine + c.lambda_cvc * terms.cvc;
        for (term, v) in [
            ("pixel", terms.pixel),
            ("ssim", terms.ssim),
            ("fine", terms.fine),
            ("cvc", terms.cvc),
            ("total", terms.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, term });
            }
        }
        if !backward {
            return Ok(BatchPass {
                losses: terms,
                grads: None,
            });
        }

        let mut view_grads = Grads::zeros_like(&scene.store);
        let mut d_fh = vec![0.0; f_h.len()];
        for (&v, (gs, cache, _, state, upstream, gf)) in batch.iter().zip(&rendered) {
            let mut rg = render_backward(gs, &self.views[v].camera, state, upstream)?;
            for (g, f) in rg.log_scale.iter_mut().zip(gf) {
                *g += c.lambda_fine * f;
            }
            let d = scene.view_backward(cache, &rg, &mut view_grads);
            d_fh.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        let mut structural = Grads::zeros_like(&scene.store);
        if c.svc {
            scene.structural_backward(&hde, &d_fh, &mut structural);
        }
        Ok(BatchPass {
            losses: terms,
            grads: Some((
                StepGradients {
                    view: view_grads,
                    structural,
                },
                hde,
            )),
        })
    }

    /// Runs one iteration: sample, forward, backward, optimizer step,
    /// normalization statistics and, on cadence, pruning.
    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.iteration + 1;
        let active = level_schedule(it, &self.config);
        let previous = self.scene.active_levels;
        let batch = self.sample_batch();
        let activation_jump = if active > previous {
            let before = self.pass(&batch, previous, false, it)?.losses.total;
            let after = self.pass(&batch, active, false, it)?.losses.total;
            Some(after - before)
        } else {
            None
        };
        let pass = self.pass(&batch, active, true, it)?;
        let (grads, hde) = pass.grads.expect("requested");
        let grad_norms = grads.report(&self.scene.store);
        let rejected = self
            .adam
            .step(&mut self.scene.store, &grads.total(), &self.config.learning_rates);
        self.scene.cscm.update_running(&mut self.scene.store, &hde);
        self.scene.active_levels = active;
        self.iteration = it;

        let prune = if self.config.cvpm && it % self.config.prune_every == 0 {
            Some(self.prune(it)?)
        } else {
            None
        };
        Ok(StepRecord {
            iteration: it,
            views: batch.iter().map(|&v| self.views[v].index).collect(),
            active_levels: active,
            loss: pass.losses,
            grad_norms,
            anchors: self.scene.anchor_count(),
            gaussians: self.scene.live_slot_count(),
            activation_jump,
            rejected_groups: rejected.iter().map(|g| g.name().to_string()).collect(),
            prune,
        })
    }

    /// Runs the remaining iterations, handing each record to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let record = self.step()?;
            log(&record)?;
        }
        Ok(())
    }

    /// Applies the pruning mask from the next group of training cameras.
    /// A round that would remove every Gaussian is skipped.
    pub fn prune(&mut self, iteration: u64) -> Result<PruneReport> {
        let (refs, means) = self.scene.live_means();
        self.scene.bounds.refresh_statistics(&means);
        let n = self.views.len();
        let count = self.config.prune_cameras.min(n);
        let cams: Vec<usize> = (0..count).map(|j| (self.prune_rounds * count + j) % n).collect();
        self.prune_rounds += 1;
        let ctx = PruneContext {
            unit: self.unit,
            centroid: self.scene.bounds.centroid,
            sigma: self.scene.bounds.spatial_sigma,
            thresholds: self.config.prune,
        };
        let decisions: Vec<_> = cams
            .iter()
            .map(|&v| prune_mask(&means, &self.views[v].camera, &ctx))
            .collect();
        let mask = combine_decisions(&decisions);
        let flagged = |f: fn(&crate::cvpm::PruneDecision) -> &Vec<bool>| {
            (0..means.len()).filter(|&i| decisions.iter().any(|d| f(d)[i])).count()
        };
        let mut report = PruneReport {
            iteration,
            cameras: cams.iter().map(|&v| self.views[v].index).collect(),
            flagged_near_camera: flagged(|d| &d.near_camera),
            flagged_outlier: flagged(|d| &d.outlier),
            ..Default::default()
        };
        let dead: Vec<SlotRef> = refs.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect();
        if !dead.is_empty() && dead.len() < refs.len() {
            let (keep, removed) = self.scene.remove_slots(&dead)?;
            if removed > 0 {
                self.adam.retain_anchor_rows(&self.scene.store, &keep)?;
            }
            report.removed_gaussians = dead.len();
            report.removed_anchors = removed;
        }
        report.surviving_gaussians = self.scene.live_slot_count();
        report.surviving_anchors = self.scene.anchor_count();
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricTable {
    /// Scores `(view index, render, ground truth)` triples.
    pub fn from_images<'a>(items: impl IntoIterator<Item = (usize, &'a ImageBuffer, &'a ImageBuffer)>) -> Result<Self> {
        let params = SsimParams::default();
        let views = items
            .into_iter()
            .map(|(view, r, gt)| {
                Ok(ViewMetrics {
                    view,
                    psnr: psnr(r, gt)?,
                    ssim: ssim(r, gt, &params)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = views.len().max(1) as f64;
        Ok(Self {
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
        })
    }
}

/// Renders each view with the scene's active levels and scores it.
pub fn evaluate(scene: &NeuralScene, views: &[TrainView]) -> Result<MetricTable> {
    let renders = views
        .iter()
        .map(|v| scene.render(&v.camera).map(|o| o.color))
        .collect::<Result<Vec<_>>>()?;
    MetricTable::from_images(views.iter().zip(&renders).map(|(v, r)| (v.index, r, &v.image)))
}
