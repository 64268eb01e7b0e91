//! Teacher-student training loop.
//!
//! Every step trains the student on one labelled scene. After warmup it also
//! trains on `unlabelled_per_step` scenes pseudo-labelled by the EMA teacher,
//! weighted by `lambda_u / unlabelled_per_step`. The teacher mirrors the student
//! during warmup and follows it with the configured momentum afterwards.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, PcMode, Strategy};
use crate::harness::detector::{Detector, DetectorGrad, SceneRegionClassifier};
use crate::harness::eval::evaluate_ap;
use crate::numcore::{EmaState, Rng};
use crate::pcdisc::{cross_model_pc, quality_flags, temporal_pc, PcSet, QualityFlags};
use crate::pseudo::{assign_proposals, filter_by_score, nms, AssignedTo, BBox, LabelStore, PseudoLabel};
use crate::regloss::{encode_deltas, reg_star_loss, BoxDeltas};
use crate::synthbench::{
    derive_seed, gen_proposals, make_split, proposal_feature, prototypes_for, ClassPrototypes, Dataset, Scene,
};
use crate::vcloss::{build_virtual_weight, extend_logits, masked_lse_loss, TargetSpec, VirtualWeight};

/// Sub-stream ids of a learner's random generator.
mod stream {
    pub const INIT: u64 = 1;
    pub const ORDER: u64 = 2;
    pub const LABELLED: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const STUDENT: u64 = 5;
    pub const CROSS: u64 = 6;
}

/// Seed domain of the second learner in cross-model mode.
const SECOND_LEARNER: u64 = 0x4c52_4e32;

/// Bookkeeping of what the loop did; all counts refer to the first learner.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub labelled_visits: u64,
    pub unlabelled_visits: u64,
    /// Unlabelled scenes touched before warmup ended. Always zero.
    pub unlabelled_visits_in_warmup: u64,
    pub pseudo_labels: u64,
    /// Pseudo labels whose potential-category set has two members.
    pub confusing_labels: u64,
    /// Confusing labels whose competing category is background.
    pub background_confusing_labels: u64,
    /// Student proposals assigned to a pseudo label.
    pub fg_samples: u64,
    /// Of those, samples whose pseudo label is confusing.
    pub confusing_samples: u64,
    pub bg_samples: u64,
    /// Samples trained towards the virtual category.
    pub vc_samples: u64,
    pub discarded_samples: u64,
    /// Cross-entropy terms emitted for confusing samples by `keep`.
    pub keep_terms: u64,
    /// Samples with at least one regression axis enabled.
    pub reg_samples: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApPoint {
    pub iteration: usize,
    pub ap: f64,
}

/// Outcome of one run. Wall-clock time is kept out of the serialised record
/// so that records of identical runs compare equal byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub final_ap: f64,
    pub trajectory: Vec<ApPoint>,
    pub counters: Counters,
    pub config: ExperimentConfig,
    pub teacher: Detector,
    pub student: Detector,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Epoch-wise shuffled visiting order.
struct Order {
    ids: Vec<u64>,
    pos: usize,
}

impl Order {
    fn new(ids: Vec<u64>) -> Self {
        let pos = ids.len();
        Self { ids, pos }
    }

    fn next(&mut self, rng: &mut Rng) -> u64 {
        if self.pos == self.ids.len() {
            rng.shuffle(&mut self.ids);
            self.pos = 0;
        }
        self.pos += 1;
        self.ids[self.pos - 1]
    }
}

/// Read-only context shared by the learners of a run.
struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    protos: &'a ClassPrototypes,
    scenes: &'a [Scene],
}

/// Pseudo label plus everything derived from it for one unlabelled scene.
struct LabelInfo {
    label: PseudoLabel,
    pc: PcSet,
    flags: QualityFlags,
    virtual_weight: Option<VirtualWeight>,
}

struct Learner {
    student: Detector,
    teacher: Detector,
    ema: EmaState,
    order_rng: Rng,
    labelled_rng: Rng,
    teacher_rng: Rng,
    student_rng: Rng,
    cross_rng: Rng,
    labelled: Order,
    unlabelled: Order,
    store: LabelStore,
    counters: Counters,
}

impl Learner {
    fn new(ctx: &Ctx<'_>, seed: u64, labelled: &[u64], unlabelled: &[u64]) -> Result<Self> {
        let mut init_rng = Rng::with_stream(seed, stream::INIT);
        let student = Detector::init(&ctx.cfg.benchmark, ctx.cfg.init_std, &mut init_rng);
        let ema = EmaState::new(student.flatten(), ctx.cfg.ema_momentum)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            ema,
            order_rng: Rng::with_stream(seed, stream::ORDER),
            labelled_rng: Rng::with_stream(seed, stream::LABELLED),
            teacher_rng: Rng::with_stream(seed, stream::TEACHER),
            student_rng: Rng::with_stream(seed, stream::STUDENT),
            cross_rng: Rng::with_stream(seed, stream::CROSS),
            labelled: Order::new(labelled.to_vec()),
            unlabelled: Order::new(unlabelled.to_vec()),
            store: LabelStore::new(),
            counters: Counters::default(),
        })
    }

    fn step(&mut self, ctx: &Ctx<'_>, iteration: usize, other_teacher: Option<&Detector>) -> Result<()> {
        let cfg = ctx.cfg;
        let in_warmup = iteration < cfg.warmup_iters;
        let mut grad = DetectorGrad::zeros_like(&self.student);

        let id = self.labelled.next(&mut self.order_rng);
        self.counters.labelled_visits += 1;
        let mut loss = self.labelled_loss(ctx, &ctx.scenes[id as usize], &mut grad)?;

        let r = cfg.unlabelled_per_step;
        if !in_warmup && r > 0 && cfg.lambda_u > 0.0 {
            let weight = cfg.lambda_u / r as f64;
            for _ in 0..r {
                let id = self.unlabelled.next(&mut self.order_rng);
                self.counters.unlabelled_visits += 1;
                if iteration < cfg.warmup_iters {
                    self.counters.unlabelled_visits_in_warmup += 1;
                }
                loss += self.unlabelled_loss(ctx, &ctx.scenes[id as usize], other_teacher, weight, &mut grad)?;
            }
        }

        if !loss.is_finite() {
            return Err(divergence(cfg, iteration, format!("loss is {loss}")));
        }
        self.student
            .apply_sgd(&grad, cfg.lr)
            .map_err(|e| divergence(cfg, iteration, e.to_string()))?;
        let momentum = if in_warmup { 0.0 } else { cfg.ema_momentum };
        self.ema.update_with_momentum(&self.student.flatten(), momentum)?;
        self.teacher.load_flat(&self.ema.teacher)?;
        self.counters.steps += 1;
        Ok(())
    }

    /// Cross-entropy plus full regression against ground truth.
    fn labelled_loss(&mut self, ctx: &Ctx<'_>, scene: &Scene, grad: &mut DetectorGrad) -> Result<f64> {
        let cfg = ctx.cfg;
        let bench = &cfg.benchmark;
        let proposals = gen_proposals(scene, bench, &mut self.labelled_rng);
        let assignments = assign_proposals(&proposals, &scene.gt_boxes(), cfg.fg_thr, cfg.bg_thr)?;
        let mut total = 0.0;
        for (p, a) in proposals.iter().zip(&assignments) {
            let feature = proposal_feature(scene, ctx.protos, p, bench.noise_sigma, &mut self.labelled_rng).feature;
            let (cls, target_box) = match a.assigned {
                AssignedTo::Target(j) => (scene.objects[j].cls, Some(scene.objects[j].bbox)),
                AssignedTo::Background => (bench.background(), None),
                AssignedTo::Ignored => continue,
            };
            total += self.ce_term(&feature, cls, 0.0, 1.0, grad)?;
            if let Some(t) = target_box {
                total += self.reg_term(&feature, p, &t, QualityFlags::BOTH, cfg.smooth_l1_beta, 1.0, grad)?;
            }
        }
        Ok(total)
    }

    fn unlabelled_loss(
        &mut self,
        ctx: &Ctx<'_>,
        scene: &Scene,
        other_teacher: Option<&Detector>,
        weight: f64,
        grad: &mut DetectorGrad,
    ) -> Result<f64> {
        let cfg = ctx.cfg;
        let infos = self.pseudo_label(ctx, scene, other_teacher)?;
        let bench = &cfg.benchmark;
        let background = bench.background();
        let gamma = cfg.focal_gamma;

        let boxes: Vec<BBox> = infos.iter().map(|i| i.label.bbox).collect();
        let proposals = gen_proposals(scene, bench, &mut self.student_rng);
        let assignments = assign_proposals(&proposals, &boxes, cfg.fg_thr, cfg.bg_thr)?;
        let mut total = 0.0;
        for (p, a) in proposals.iter().zip(&assignments) {
            let feature = proposal_feature(scene, ctx.protos, p, bench.noise_sigma, &mut self.student_rng).feature;
            let info = match a.assigned {
                AssignedTo::Target(j) => &infos[j],
                AssignedTo::Background => {
                    self.counters.bg_samples += 1;
                    total += self.ce_term(&feature, background, gamma, weight, grad)?;
                    continue;
                }
                AssignedTo::Ignored => continue,
            };
            self.counters.fg_samples += 1;
            let confusing = info.pc.is_confusing();
            if confusing {
                self.counters.confusing_samples += 1;
            }
            let cls = info.label.cls;
            total += match (cfg.strategy, confusing) {
                (Strategy::Baseline, _) | (Strategy::Discard | Strategy::Keep, false) => {
                    self.ce_term(&feature, cls, gamma, weight, grad)?
                }
                (Strategy::Discard, true) => {
                    self.counters.discarded_samples += 1;
                    0.0
                }
                (Strategy::Keep, true) => {
                    let mut sum = 0.0;
                    for &m in info.pc.members() {
                        self.counters.keep_terms += 1;
                        sum += self.ce_term(&feature, m, gamma, weight, grad)?;
                    }
                    sum
                }
                (Strategy::Vc, _) => {
                    if confusing {
                        self.counters.vc_samples += 1;
                    }
                    let vw = info.virtual_weight.as_ref().expect("built for vc");
                    self.vc_term(&feature, &info.pc, cls, vw, gamma, weight, grad)?
                }
            };
            if cfg.reg_star_enabled {
                if info.flags != QualityFlags::default() {
                    self.counters.reg_samples += 1;
                }
                total += self.reg_term(&feature, p, &info.label.bbox, info.flags, cfg.smooth_l1_beta, weight, grad)?;
            }
        }
        Ok(total)
    }

    /// Teacher pseudo labels of `scene` with potential-category sets, quality
    /// flags and (for the virtual-category strategy) virtual weights.
    fn pseudo_label(
        &mut self,
        ctx: &Ctx<'_>,
        scene: &Scene,
        other_teacher: Option<&Detector>,
    ) -> Result<Vec<LabelInfo>> {
        let cfg = ctx.cfg;
        let bench = &cfg.benchmark;
        let background = bench.background();
        let canvas = (scene.canvas.width, scene.canvas.height);

        let mut dets = Vec::new();
        for p in gen_proposals(scene, bench, &mut self.teacher_rng) {
            let feature = proposal_feature(scene, ctx.protos, &p, bench.noise_sigma, &mut self.teacher_rng).feature;
            if let Some(d) = self.teacher.detect(&p, &feature, canvas)? {
                dets.push(d);
            }
        }
        let current = filter_by_score(&nms(&dets, cfg.nms_thr), cfg.score_thr, background);
        let n_current = current.len();
        // temporal verification treats every label of this and the previous
        // visit as a sample, so labels that vanished stay in play as confusing
        let labels = match cfg.pc_mode {
            PcMode::Temporal => {
                let mut union = current.clone();
                union.extend(self.store.record_and_fetch_last(scene.image_id, current));
                union
            }
            PcMode::Cross => current,
        };
        // teacher view of each pseudo box, drawn for every strategy so that
        // all strategies consume the stream identically
        let teacher_features: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| proposal_feature(scene, ctx.protos, &l.bbox, bench.noise_sigma, &mut self.teacher_rng).feature)
            .collect();

        let mut pcs = Vec::with_capacity(labels.len());
        match cfg.pc_mode {
            PcMode::Temporal => {
                for (i, b) in labels.iter().enumerate() {
                    let others: Vec<PseudoLabel> = labels
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, l)| *l)
                        .collect();
                    let (pc, matched) = temporal_pc(b, &others, cfg.iou_close_thr, background);
                    pcs.push((pc, quality_flags(&b.bbox, matched.as_ref(), cfg.t_loc)?));
                }
            }
            PcMode::Cross => {
                let other = other_teacher.ok_or_else(|| {
                    Error::InvalidArgument("cross-model mode needs a second teacher".into())
                })?;
                let mut classifier = SceneRegionClassifier {
                    detector: other,
                    scene,
                    protos: ctx.protos,
                    noise_sigma: bench.noise_sigma,
                    rng: &mut self.cross_rng,
                    last_box: None,
                };
                for b in &labels {
                    let pc = cross_model_pc(b, &mut classifier)?;
                    pcs.push((pc, quality_flags(&b.bbox, classifier.last_box.as_ref(), cfg.t_loc)?));
                }
            }
        }

        let scale = if cfg.strategy == Strategy::Vc {
            Some(cfg.vc_config().resolve_scale(&self.student.cls.weights)?)
        } else {
            None
        };
        // the baseline knows nothing of potential categories and trains on the
        // labels of this visit only
        let n_train = if cfg.strategy == Strategy::Baseline { n_current } else { labels.len() };
        let mut infos = Vec::with_capacity(n_train);
        for ((label, (pc, flags)), f_hat) in labels.into_iter().zip(pcs).zip(teacher_features).take(n_train) {
            self.counters.pseudo_labels += 1;
            if pc.is_confusing() {
                self.counters.confusing_labels += 1;
                if pc.contains(background) {
                    self.counters.background_confusing_labels += 1;
                }
            }
            let virtual_weight = match scale {
                Some(s) => Some(build_virtual_weight(&f_hat, s)?),
                None => None,
            };
            infos.push(LabelInfo {
                label,
                pc,
                flags,
                virtual_weight,
            });
        }
        Ok(infos)
    }

    fn ce_term(&self, feature: &[f64], cls: usize, gamma: f64, weight: f64, grad: &mut DetectorGrad) -> Result<f64> {
        let logits = self.student.cls.forward(feature)?;
        let res = masked_lse_loss(&logits, &TargetSpec::hard(cls), gamma)?;
        grad.cls.accumulate(feature, &res.grad_logits, weight);
        Ok(weight * res.value)
    }

    #[allow(clippy::too_many_arguments)]
    fn vc_term(
        &self,
        feature: &[f64],
        pc: &PcSet,
        cls: usize,
        virtual_weight: &VirtualWeight,
        gamma: f64,
        weight: f64,
        grad: &mut DetectorGrad,
    ) -> Result<f64> {
        let k = self.student.num_classes();
        let logits = extend_logits(feature, &self.student.cls.weights, virtual_weight)?;
        let res = masked_lse_loss(&logits, &TargetSpec::for_sample(pc, cls, k)?, gamma)?;
        // the virtual weight is a constant: only the first k logits carry parameters
        grad.cls.accumulate(feature, &res.grad_logits[..k], weight);
        Ok(weight * res.value)
    }

    #[allow(clippy::too_many_arguments)]
    fn reg_term(
        &self,
        feature: &[f64],
        proposal: &BBox,
        target: &BBox,
        flags: QualityFlags,
        beta: f64,
        weight: f64,
        grad: &mut DetectorGrad,
    ) -> Result<f64> {
        if flags == QualityFlags::default() {
            return Ok(0.0);
        }
        let pred = BoxDeltas::from_slice(&self.student.reg.forward(feature)?);
        let (value, g) = reg_star_loss(&pred, &encode_deltas(proposal, target), flags, beta);
        grad.reg.accumulate(feature, &g.to_array(), weight);
        Ok(weight * value)
    }
}

fn divergence(cfg: &ExperimentConfig, iteration: usize, detail: String) -> Error {
    Error::Divergence {
        iteration,
        detail,
        config: cfg.to_toml_string().unwrap_or_else(|e| format!("<unprintable config: {e}>")),
    }
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let bench = &cfg.benchmark;
    if data.train.len() != bench.num_scenes {
        return Err(Error::Dataset(format!(
            "dataset has {} training scenes, config expects {}",
            data.train.len(),
            bench.num_scenes
        )));
    }
    if data.test.is_empty() {
        return Err(Error::Dataset("dataset has no test scenes".into()));
    }
    for s in data.train.iter().chain(&data.test) {
        if s.canvas.width != bench.canvas_width || s.canvas.height != bench.canvas_height {
            return Err(Error::Dataset(format!("scene {} has a different canvas size", s.image_id)));
        }
        if let Some(o) = s.objects.iter().find(|o| o.cls >= bench.num_fg_classes) {
            return Err(Error::Dataset(format!("scene {} has class {} out of range", s.image_id, o.cls)));
        }
    }
    Ok(())
}

/// Trains one configuration on `data` and evaluates it every `eval_interval` steps.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunResult> {
    let start = Instant::now();
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let protos = prototypes_for(&cfg.benchmark)?;
    let (labelled, unlabelled) = make_split(data.train.len(), cfg.label_ratio, cfg.seed)?;
    let ctx = Ctx {
        cfg,
        protos: &protos,
        scenes: &data.train,
    };

    let mut first = Learner::new(&ctx, cfg.seed, &labelled, &unlabelled)?;
    let mut second = match cfg.pc_mode {
        PcMode::Cross => Some(Learner::new(
            &ctx,
            derive_seed(cfg.seed, SECOND_LEARNER),
            &labelled,
            &unlabelled,
        )?),
        PcMode::Temporal => None,
    };

    let mut trajectory = Vec::with_capacity(cfg.iterations / cfg.eval_interval);
    for it in 0..cfg.iterations {
        match second.as_mut() {
            Some(second) => {
                let (t1, t2) = (first.teacher.clone(), second.teacher.clone());
                first.step(&ctx, it, Some(&t2))?;
                second.step(&ctx, it, Some(&t1))?;
            }
            None => first.step(&ctx, it, None)?,
        }
        if (it + 1) % cfg.eval_interval == 0 {
            let model = if cfg.eval_teacher { &first.teacher } else { &first.student };
            let ap = evaluate_ap(model, &protos, &cfg.benchmark, &data.test, cfg.nms_thr, cfg.eval_iou)?;
            trajectory.push(ApPoint { iteration: it + 1, ap });
        }
    }

    Ok(RunResult {
        label: cfg.variant_label(),
        seed: cfg.seed,
        final_ap: trajectory.last().map_or(0.0, |p| p.ap),
        trajectory,
        counters: first.counters,
        config: cfg.clone(),
        teacher: first.teacher,
        student: first.student,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
