//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,5` runs a subset; `ACCEPTANCE_STRICT=1` makes any
//! FAIL exit non-zero.

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use advlab::attacks::*;
use advlab::data::{desk_digits, LabeledDataset};
use advlab::defenses::*;
use advlab::diagnostics::{diagnose, DiagnosticConfig, DiagnosticReport};
use advlab::lid::{paired_features, train_detector, LidConfig, LidDetector, LidFeatures};
use advlab::manifold::*;
use advlab::metrics::{self, best_per_image};
use advlab::model::*;
use advlab_autodiff::{AnalyticRule, NodeId, Padding, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Models shared between criteria; each is trained on first use.
struct Fixtures {
    train: LabeledDataset,
    test: LabeledDataset,
    plain: OnceCell<Arc<Classifier>>,
    surrogate: OnceCell<Arc<Classifier>>,
    adv: OnceCell<Arc<Classifier>>,
    thermo: OnceCell<Arc<Classifier>>,
    pad: OnceCell<Arc<Classifier>>,
    cnn: OnceCell<Arc<Classifier>>,
}

fn tc() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    }
}

fn mlp(shape: &[usize], seed: u64) -> Classifier {
    Classifier::mlp(shape, &[256, 128], 10, seed).unwrap()
}

const ADV_EPS: f64 = 0.1;
const DESK_EPS: f64 = 0.3;

impl Fixtures {
    fn new() -> Self {
        let (train, test) = desk_digits(0).unwrap();
        Self {
            train,
            test,
            plain: OnceCell::new(),
            surrogate: OnceCell::new(),
            adv: OnceCell::new(),
            thermo: OnceCell::new(),
            pad: OnceCell::new(),
            cnn: OnceCell::new(),
        }
    }

    fn eval(&self, n: usize) -> (LabeledDataset, Goal) {
        let e = self.test.take(n);
        let g = Goal::untargeted(&e.labels);
        (e, g)
    }

    fn plain(&self) -> Arc<Classifier> {
        self.plain
            .get_or_init(|| Arc::new(train(&mlp(&[16, 16, 1], 1), &self.train, &tc()).unwrap()))
            .clone()
    }

    /// Independently initialized and shuffled, for transfer attacks.
    fn surrogate(&self) -> Arc<Classifier> {
        self.surrogate
            .get_or_init(|| {
                let cfg = TrainConfig { seed: 7, ..tc() };
                Arc::new(train(&mlp(&[16, 16, 1], 7), &self.train, &cfg).unwrap())
            })
            .clone()
    }

    fn adv(&self) -> Arc<Classifier> {
        self.adv
            .get_or_init(|| {
                let at = AdversarialTraining {
                    epsilon: ADV_EPS,
                    steps: 7,
                };
                Arc::new(adversarial_train(&mlp(&[16, 16, 1], 1), &self.train, &tc(), &at).unwrap())
            })
            .clone()
    }

    fn thermo_stage() -> Arc<dyn InputStage> {
        Arc::new(Thermometer::new(10).unwrap())
    }

    fn thermo(&self) -> DefendedModel {
        let stage = Self::thermo_stage();
        let m = self
            .thermo
            .get_or_init(|| {
                let front = DefendedModelFront::new(vec![stage.clone()]);
                Arc::new(train_with(&mlp(&[16, 16, 10], 1), &self.train, &tc(), Some(&front), None).unwrap())
            })
            .clone();
        DefendedModel::new(vec![16, 16, 1], vec![stage], m, None).unwrap()
    }

    fn pad(&self) -> DefendedModel {
        let stage: Arc<dyn InputStage> = Arc::new(RescalePad::new(19));
        let m = self
            .pad
            .get_or_init(|| {
                let front = DefendedModelFront::new(vec![stage.clone()]);
                Arc::new(train_with(&mlp(&[19, 19, 1], 1), &self.train, &tc(), Some(&front), None).unwrap())
            })
            .clone();
        DefendedModel::new(vec![16, 16, 1], vec![stage], m, None).unwrap()
    }

    fn sap(&self) -> DefendedModel {
        DefendedModel::new(vec![16, 16, 1], vec![], self.plain(), Some(SapConfig::default())).unwrap()
    }

    fn cnn(&self) -> Arc<Classifier> {
        self.cnn
            .get_or_init(|| {
                let base = Classifier::cnn(&[16, 16, 1], 10, 1).unwrap();
                Arc::new(train(&base, &self.train, &tc()).unwrap())
            })
            .clone()
    }
}

fn accuracy(outs: &[AttackOutcome]) -> f64 {
    outs.iter().filter(|o| !o.success).count() as f64 / outs.len() as f64
}

fn success(outs: &[AttackOutcome]) -> f64 {
    1.0 - accuracy(outs)
}

fn pgd(eps: f64, iterations: usize) -> AttackConfig {
    AttackConfig {
        epsilon: eps,
        iterations,
        ..AttackConfig::new(AttackKind::PgdLinf)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------------------
// 1, 2: autodiff

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// A random smooth network: optional conv layer, then 1 to 3 dense layers
/// with random activations, ending in cross-entropy.
struct RandomNet {
    conv: bool,
    acts: Vec<u8>,
    params: Vec<Tensor>,
    x: Tensor,
    labels: Vec<usize>,
}

impl RandomNet {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let conv = rng.random_bool(0.4);
        let batch = rng.random_range(1..4);
        let (x, mut width) = if conv {
            (random_tensor(rng, &[batch, 5, 5, 2], 1.0), 5 * 5 * 3)
        } else {
            let w = rng.random_range(3..9);
            (random_tensor(rng, &[batch, w], 1.0), w)
        };
        let mut params = Vec::new();
        if conv {
            params.push(random_tensor(rng, &[3, 3, 2, 3], 0.5));
        }
        let depth = rng.random_range(1..4);
        let mut acts = Vec::new();
        for d in 0..depth {
            let out = if d + 1 == depth { 4 } else { rng.random_range(3..8) };
            params.push(random_tensor(rng, &[width, out], 0.7));
            params.push(random_tensor(rng, &[out], 0.2));
            acts.push(rng.random_range(0..3));
            width = out;
        }
        let labels = (0..batch).map(|_| rng.random_range(0..4)).collect();
        Self {
            conv,
            acts,
            params,
            x,
            labels,
        }
    }

    fn eval(&self, x: &Tensor, params: &[Tensor]) -> (f64, Tensor, Vec<Tensor>) {
        let mut t = Tape::new();
        let xi = t.leaf(x.clone());
        let ps: Vec<NodeId> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let mut h = xi;
        let mut k = 0;
        if self.conv {
            h = t.conv2d(h, ps[0], Padding::Same).unwrap();
            h = t.tanh(h).unwrap();
            let n = x.shape()[0];
            h = t.reshape(h, &[n, 75]).unwrap();
            k = 1;
        }
        for (d, act) in self.acts.iter().enumerate() {
            h = t.matmul(h, ps[k]).unwrap();
            h = t.bias_add(h, ps[k + 1]).unwrap();
            k += 2;
            if d + 1 < self.acts.len() {
                h = match act {
                    0 => t.tanh(h),
                    1 => t.sigmoid(h),
                    _ => {
                        let e = t.exp(h).unwrap();
                        t.affine(e, 0.5, 0.0)
                    }
                }
                .unwrap();
            }
        }
        let loss = t.softmax_cross_entropy(h, &self.labels).unwrap();
        let s = t.sum(loss).unwrap();
        let mut wrt = vec![xi];
        wrt.extend(&ps);
        let g = t.backward(s, &wrt).unwrap();
        (
            t.value(s).item().unwrap(),
            g.get(xi).unwrap().clone(),
            ps.iter().map(|p| g.get(*p).unwrap().clone()).collect(),
        )
    }
}

fn criterion_1(_: &Fixtures) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..100 {
        let net = RandomNet::sample(&mut rng);
        let (_, gx, gp) = net.eval(&net.x, &net.params);
        for j in 0..net.x.numel() {
            let (mut a, mut b) = (net.x.clone(), net.x.clone());
            a.data_mut()[j] += h;
            b.data_mut()[j] -= h;
            let fd = (net.eval(&a, &net.params).0 - net.eval(&b, &net.params).0) / (2.0 * h);
            worst = worst.max(rel_err(gx.data()[j], fd));
            coords += 1;
        }
        for (k, p) in net.params.iter().enumerate() {
            for j in 0..p.numel() {
                let (mut a, mut b) = (net.params.clone(), net.params.clone());
                a[k].data_mut()[j] += h;
                b[k].data_mut()[j] -= h;
                let fd = (net.eval(&net.x, &a).0 - net.eval(&net.x, &b).0) / (2.0 * h);
                worst = worst.max(rel_err(gp[k].data()[j], fd));
                coords += 1;
            }
        }
    }
    let t = start.elapsed();
    verdict(
        worst < 1e-4 && within(t, 30),
        format!("100 networks, {coords} coordinates, max relative error {worst:.2e}, {t:.1?}"),
    )
}

type Build = fn(&mut Tape, &[NodeId]) -> advlab_autodiff::Result<NodeId>;

fn op_catalogue() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), Build)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let std = (-2.0, 2.0);
    vec![
        ("add", s(&[&[3, 4], &[3, 4]]), std, |t, x| t.add(x[0], x[1])),
        ("sub", s(&[&[5], &[5]]), std, |t, x| t.sub(x[0], x[1])),
        ("mul", s(&[&[2, 3], &[2, 3]]), std, |t, x| t.mul(x[0], x[1])),
        ("div", s(&[&[4], &[4]]), (0.5, 2.0), |t, x| t.div(x[0], x[1])),
        ("matmul", s(&[&[3, 4], &[4, 2]]), std, |t, x| t.matmul(x[0], x[1])),
        ("bias_add", s(&[&[3, 4], &[4]]), std, |t, x| t.bias_add(x[0], x[1])),
        ("conv2d", s(&[&[2, 5, 5, 2], &[3, 3, 2, 3]]), std, |t, x| {
            t.conv2d(x[0], x[1], Padding::Valid)
        }),
        ("relu", s(&[&[10]]), std, |t, x| t.relu(x[0])),
        ("sigmoid", s(&[&[10]]), std, |t, x| t.sigmoid(x[0])),
        ("tanh", s(&[&[10]]), std, |t, x| t.tanh(x[0])),
        ("exp", s(&[&[10]]), std, |t, x| t.exp(x[0])),
        ("log", s(&[&[10]]), (0.1, 2.0), |t, x| t.log(x[0])),
        ("max_pool2", s(&[&[2, 4, 4, 3]]), std, |t, x| t.max_pool2(x[0])),
        ("softmax_cross_entropy", s(&[&[3, 5]]), std, |t, x| {
            t.softmax_cross_entropy(x[0], &[0, 4, 2])
        }),
        ("margin", s(&[&[3, 5]]), std, |t, x| t.margin(x[0], &[1, 3, 0], false)),
        ("sum", s(&[&[3, 2]]), std, |t, x| t.sum(x[0])),
        ("mean", s(&[&[3, 2]]), std, |t, x| t.mean(x[0])),
        ("sum_rows", s(&[&[3, 2, 2]]), std, |t, x| t.sum_rows(x[0])),
        ("affine", s(&[&[7]]), std, |t, x| t.affine(x[0], -1.5, 0.25)),
        ("reshape", s(&[&[2, 6]]), std, |t, x| t.reshape(x[0], &[3, 4])),
        ("pad", s(&[&[2, 3, 3, 2]]), std, |t, x| t.pad(x[0], 1, 2, 5, 6)),
        ("crop", s(&[&[2, 5, 5, 1]]), std, |t, x| t.crop(x[0], 1, 2, 3, 2)),
        ("resize_nearest", s(&[&[1, 4, 4, 2]]), std, |t, x| t.resize_nearest(x[0], 6, 5)),
        ("resize_bilinear", s(&[&[1, 4, 4, 2]]), std, |t, x| t.resize_bilinear(x[0], 7, 6)),
        ("clamp", s(&[&[12]]), std, |t, x| t.clamp(x[0], -1.0, 1.0)),
        ("floor", s(&[&[6]]), std, |t, x| t.floor(x[0])),
        ("round", s(&[&[6]]), std, |t, x| t.round(x[0])),
    ]
}

/// Gradients of `Σ w ⊙ tanh(op(x))` with every node up to the op either
/// left alone or overridden with its own analytic rule.
fn chained_gradients(build: Build, inputs: &[Tensor], w_seed: u64, override_node: Option<usize>) -> Vec<Tensor> {
    let mut t = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let pre: Vec<NodeId> = leaves.iter().map(|&l| t.affine(l, 1.0, 0.0).unwrap()).collect();
    let out = build(&mut t, &pre).unwrap();
    let squash = t.tanh(out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(w_seed);
    let shape = t.value(squash).shape().to_vec();
    let w = t.leaf(random_tensor(&mut rng, &shape, 1.0));
    let prod = t.mul(squash, w).unwrap();
    let s = t.sum(prod).unwrap();
    let nodes: Vec<NodeId> = pre.iter().copied().chain([out, squash, prod]).collect();
    if let Some(k) = override_node {
        let id = nodes[k];
        let op = t.node(id).unwrap().op.clone();
        t.set_override(id, Arc::new(AnalyticRule(op))).unwrap();
    }
    let g = t.backward(s, &leaves).unwrap();
    leaves.iter().map(|l| g.get(*l).unwrap().clone()).collect()
}

fn criterion_2(_: &Fixtures) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut offender = String::new();
    for (name, shapes, (lo, hi), build) in op_catalogue() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
            })
            .collect();
        let reference = chained_gradients(build, &inputs, 5, None);
        for node in 0..inputs.len() + 3 {
            let over = chained_gradients(build, &inputs, 5, Some(node));
            for (a, b) in reference.iter().zip(&over) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    let d = (x - y).abs();
                    if d > worst {
                        worst = d;
                        offender = name.to_string();
                    }
                }
            }
            checked += 1;
        }
    }
    verdict(
        worst <= 1e-12,
        format!("{checked} node overrides across the op set, max deviation {worst:.1e} {offender}"),
    )
}

// ---------------------------------------------------------------------------
// 3 to 7: defenses

fn criterion_3(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let model = f.thermo();
    let (e, goal) = f.eval(100);
    let clean = model.accuracy(&e.images, &e.labels, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let plain = pgd_linf(&model, &e.images, &goal, &pgd(DESK_EPS, 40)).unwrap();
    let zero = plain.iter().filter(|o| o.zero_gradient).count();
    let bpda = pgd_linf(
        &model,
        &e.images,
        &goal,
        &AttackConfig {
            bpda: true,
            ..pgd(DESK_EPS, 40)
        },
    )
    .unwrap();
    let (pa, ba) = (accuracy(&plain), accuracy(&bpda));
    let t = start.elapsed();
    verdict(
        clean - pa <= 0.10 && zero == plain.len() && ba <= 0.05 && within(t, 300),
        format!(
            "clean {clean:.2}, plain PGD {pa:.2} with zero gradient on {zero}/{}, BPDA-PGD at ε={DESK_EPS} {ba:.2}, {t:.1?}",
            plain.len()
        ),
    )
}

fn criterion_4(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let plain = DefendedModel::undefended(f.adv());
    let stage = Fixtures::thermo_stage();
    let mut front = DefendedModelFront::new(vec![stage.clone()]);
    // The inner maximization sees the encoding's true gradient, as an
    // attacker without BPDA would.
    front.surrogates = false;
    let at = AdversarialTraining {
        epsilon: ADV_EPS,
        steps: 7,
    };
    let tm = train_with(&mlp(&[16, 16, 10], 1), &f.train, &tc(), Some(&front), Some(&at)).unwrap();
    let thermo = DefendedModel::new(vec![16, 16, 1], vec![stage], Arc::new(tm), None).unwrap();
    let (e, goal) = f.eval(100);
    let cfg = AttackConfig {
        epsilon: ADV_EPS,
        iterations: 40,
        ..AttackConfig::new(AttackKind::BpdaPgd)
    };
    let a = accuracy(&pgd_linf(&plain, &e.images, &goal, &cfg).unwrap());
    let b = accuracy(&pgd_linf(&thermo, &e.images, &goal, &cfg).unwrap());
    let t = start.elapsed();
    verdict(
        b < a && within(t, 1200),
        format!("BPDA-PGD at ε={ADV_EPS}: thermometer+adversarial {b:.2} vs adversarial {a:.2}, {t:.1?}"),
    )
}

fn criterion_5(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let model = f.pad();
    let (e, goal) = f.eval(100);
    let base = AttackConfig {
        success: SuccessCriterion::TEN_OF_TEN,
        ..pgd(DESK_EPS, 40)
    };
    let eot = accuracy(
        &pgd_linf(
            &model,
            &e.images,
            &goal,
            &AttackConfig {
                eot: Eot::Enumerate,
                ..base.clone()
            },
        )
        .unwrap(),
    );
    let single = accuracy(
        &pgd_linf(
            &model,
            &e.images,
            &goal,
            &AttackConfig {
                eot: Eot::Frozen,
                ..base
            },
        )
        .unwrap(),
    );
    let t = start.elapsed();
    verdict(
        eot <= 0.05 && single - eot >= 0.25 && within(t, 600),
        format!("10-of-10 accuracy at ε={DESK_EPS}: EOT {eot:.2}, single draw {single:.2}, {t:.1?}"),
    )
}

fn criterion_6(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let model = f.sap();
    let (e, goal) = f.eval(100);
    let cfg = AttackConfig {
        eot: Eot::Samples(10),
        success: SuccessCriterion::TEN_OF_TEN,
        ..pgd(DESK_EPS, 40)
    };
    // The gradient oracle rejects any non-finite gradient, so completing
    // the run is the finiteness check.
    let (acc, finite) = match pgd_linf(&model, &e.images, &goal, &cfg) {
        Ok(o) => (accuracy(&o), o.iter().all(|o| o.final_loss.is_finite() && o.adversarial.all_finite())),
        Err(err) => return verdict(false, format!("attack failed: {err}")),
    };
    let t = start.elapsed();
    verdict(
        acc <= 0.10 && finite && within(t, 600),
        format!("k=10 EOT-PGD at ε={DESK_EPS}: 10-of-10 accuracy {acc:.2}, all gradients finite, {t:.1?}"),
    )
}

fn criterion_7(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let stages: Vec<Arc<dyn InputStage>> = vec![
        Arc::new(BitDepth::new(3).unwrap()),
        Arc::new(JpegProxy::new(75).unwrap()),
        Arc::new(TvMinimize::new(0.5, 0.03, 30, 0.1).unwrap()),
    ];
    let front = DefendedModelFront::new(stages.clone());
    let m = train_with(&mlp(&[16, 16, 1], 1), &f.train, &tc(), Some(&front), None).unwrap();
    let model = DefendedModel::new(vec![16, 16, 1], stages, Arc::new(m), None).unwrap();
    let e = f.test.take(40);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let targets: Vec<usize> = e.labels.iter().map(|&l| (l + rng.random_range(1..10)) % 10).collect();
    let goal = Goal::targeted(&e.labels, &targets).unwrap();
    let cfg = AttackConfig {
        bpda: true,
        eot: Eot::Samples(5),
        iterations: 60,
        binary_search_steps: 4,
        initial_const: 10.0,
        rms_budget: Some(0.05),
        success: SuccessCriterion::TEN_OF_TEN,
        ..AttackConfig::new(AttackKind::LagrangianL2)
    };
    let o = lagrangian_l2(&model, &e.images, &goal, &cfg).unwrap();
    let rate = success(&o);
    let reached = o.iter().filter(|o| o.adversarial_trials == cfg.success.trials).count();
    let rms: Vec<f64> = o.iter().filter(|o| o.adversarial_trials == cfg.success.trials).map(|o| o.rms).collect();
    let t = start.elapsed();
    verdict(
        rate >= 0.95 && within(t, 900),
        format!(
            "targeted BPDA+EOT ℓ2: {rate:.2} within RMS 0.05 ({reached}/{} reach the target at median RMS {:.3}), {t:.1?}",
            o.len(),
            metrics::median(&rms).unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------------------
// 8: reparameterization

fn criterion_8(f: &Fixtures) -> (Verdict, Verdict) {
    let start = Instant::now();
    let (decoder, _) = train_decoder(&f.train, &DecoderConfig::default()).unwrap();
    let pc = ProjectionConfig::default();
    let bare = DefendedModel::undefended(f.plain());
    let (e, goal) = f.eval(50);
    let cfg = AttackConfig {
        iterations: 100,
        binary_search_steps: 6,
        ..AttackConfig::new(AttackKind::LagrangianL2)
    };
    let unsecured = lagrangian_l2(&bare, &e.images, &goal, &cfg).unwrap();
    let rc = AttackConfig {
        kind: AttackKind::Reparam,
        learning_rate: 0.05,
        ..cfg
    };
    let on = reparam_attack(&decoder, &pc, &bare, &e.images, &goal, &rc).unwrap();
    let mean_l2 = |o: &[AttackOutcome]| o.iter().map(|o| o.l2).sum::<f64>() / o.len() as f64;
    let ratio = mean_l2(&on) / mean_l2(&unsecured);
    let ta = start.elapsed();
    let a = verdict(
        success(&on) == 1.0 && ratio <= 2.0 && within(ta, 1200),
        format!(
            "on-manifold success {:.2}, mean ℓ2 {:.2e} vs unsecured {:.2e} (ratio {ratio:.2}), {ta:.1?}",
            success(&on),
            mean_l2(&on),
            mean_l2(&unsecured)
        ),
    );

    let proj: Arc<dyn InputStage> = Arc::new(ProjectionDefense::new(Arc::new(decoder), pc));
    let defended = DefendedModel::new(vec![16, 16, 1], vec![proj], f.plain(), None).unwrap();
    let (e, goal) = f.eval(20);
    let bc = AttackConfig {
        bpda: true,
        iterations: 40,
        binary_search_steps: 4,
        initial_const: 10.0,
        rms_budget: Some(RMS_BUDGET_8B),
        ..AttackConfig::new(AttackKind::LagrangianL2)
    };
    let o = lagrangian_l2(&defended, &e.images, &goal, &bc).unwrap();
    let tb = start.elapsed();
    let b = verdict(
        success(&o) >= 0.40 && within(tb, 1200),
        format!(
            "BPDA through projection: success {:.2} within RMS {RMS_BUDGET_8B}, {tb:.1?} (both parts)",
            success(&o)
        ),
    );
    (a, b)
}

/// 1.46 × the unsecured ℓ2 attack's distortion on the desk classifier,
/// expressed as per-pixel RMS.
const RMS_BUDGET_8B: f64 = 0.143;

// ---------------------------------------------------------------------------
// 9: LID

fn benign(det: &LidDetector, f: &[LidFeatures]) -> f64 {
    f.iter().filter(|f| !det.is_flagged(det.score(&f.values))).count() as f64 / f.len() as f64
}

fn successful_features(feats: Vec<LidFeatures>, outs: &[AttackOutcome]) -> Vec<LidFeatures> {
    feats.into_iter().zip(outs).filter(|(_, o)| o.success).map(|(f, _)| f).collect()
}

fn criterion_9(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let m = f.cnn();
    let dm = DefendedModel::undefended(m.clone());
    let fam = AttackConfig {
        epsilon: 0.1,
        ..AttackConfig::new(AttackKind::Fgsm)
    };
    let src = f.train.take(2000);
    let o = fgsm(&dm, &src.images, &Goal::untargeted(&src.labels), &fam).unwrap();
    let ok: Vec<usize> = (0..o.len()).filter(|&i| o[i].success).collect();
    let adv = stack_adversarial(&ok.iter().map(|&i| o[i].clone()).collect::<Vec<_>>()).unwrap();
    let (det, rep) = train_detector(&m, &src.images.select_rows(&ok), &adv, "fgsm", &LidConfig::default()).unwrap();
    let auc = rep.heldout_auc.unwrap_or(0.0);

    let (e, goal) = f.eval(200);
    let hc = AttackConfig {
        confidence: 30.0,
        iterations: 50,
        binary_search_steps: 5,
        initial_const: 10.0,
        ..AttackConfig::new(AttackKind::HighConfidenceL2)
    };
    let ho = high_confidence_attack(&dm, &e.images, &goal, &hc).unwrap();
    let (cf, af) = paired_features(&m, &e.images, &stack_adversarial(&ho).unwrap(), det.k, det.batch_size).unwrap();
    let af = successful_features(af, &ho);
    let (clean_rate, hc_rate) = (benign(&det, &cf), benign(&det, &af));
    let t = start.elapsed();
    verdict(
        auc >= 0.85 && hc_rate >= 0.85 && clean_rate >= 0.90 && within(t, 600),
        format!(
            "held-out AUC {auc:.3} on {} examples; κ=30 examples passed as benign {hc_rate:.3} ({} examples); clean passed {clean_rate:.3}, {t:.1?}",
            rep.heldout_examples,
            af.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10: diagnostics

fn diag_config(epsilon: f64, attack: AttackConfig) -> DiagnosticConfig {
    DiagnosticConfig {
        epsilon,
        grid: vec![0.05, 0.1, 0.2, 0.3],
        attack: AttackConfig { iterations: 40, ..attack },
        samples: 1000,
        sample_images: 100,
        ..DiagnosticConfig::default()
    }
}

fn names(r: &DiagnosticReport) -> String {
    let t: Vec<&str> = r.triggered().iter().map(|c| c.name()).collect();
    if t.is_empty() {
        "none".into()
    } else {
        t.join("+")
    }
}

fn criterion_10(f: &Fixtures) -> Verdict {
    let start = Instant::now();
    let (e, _) = f.eval(100);
    let surrogate = DefendedModel::undefended(f.surrogate());
    let run = |m: &DefendedModel, cfg: DiagnosticConfig| diagnose(m, &surrogate, &e, &cfg).unwrap();
    let ten = SuccessCriterion::TEN_OF_TEN;
    let base = AttackConfig::default();

    let adv = run(&DefendedModel::undefended(f.adv()), diag_config(ADV_EPS, base.clone()));
    let mut lines = vec![format!("adversarially trained: {}", names(&adv))];
    let mut pass = adv.triggered().is_empty();

    let mut pair = |name: &str, m: &DefendedModel, without: AttackConfig, with: AttackConfig| {
        let a = run(m, diag_config(DESK_EPS, without));
        let b = run(m, diag_config(DESK_EPS, with));
        pass &= !a.triggered().is_empty() && b.triggered().is_empty();
        lines.push(format!("{name}: without {} / with {}", names(&a), names(&b)));
    };
    pair(
        "thermometer",
        &f.thermo(),
        base.clone(),
        AttackConfig {
            bpda: true,
            ..base.clone()
        },
    );
    pair(
        "rescale_pad",
        &f.pad(),
        AttackConfig {
            eot: Eot::Frozen,
            success: ten,
            ..base.clone()
        },
        AttackConfig {
            eot: Eot::Enumerate,
            success: ten,
            ..base.clone()
        },
    );
    pair(
        "sap",
        &f.sap(),
        AttackConfig {
            eot: Eot::Single,
            success: ten,
            ..base.clone()
        },
        AttackConfig {
            eot: Eot::Samples(10),
            success: ten,
            ..base
        },
    );
    let t = start.elapsed();
    verdict(pass && within(t, 900), format!("{}; {t:.1?}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 11, 12

fn criterion_11(f: &Fixtures) -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    let model = DefendedModel::undefended(f.plain());
    let (e, goal) = f.eval(50);

    let fg = fgsm(
        &model,
        &e.images,
        &goal,
        &AttackConfig {
            epsilon: 0.1,
            ..AttackConfig::new(AttackKind::Fgsm)
        },
    )
    .unwrap();
    let one = pgd_linf(
        &model,
        &e.images,
        &goal,
        &AttackConfig {
            epsilon: 0.1,
            iterations: 1,
            step_size: Some(0.1),
            random_start: false,
            ..AttackConfig::new(AttackKind::PgdLinf)
        },
    )
    .unwrap();
    let same = fg.iter().zip(&one).all(|(a, b)| a.adversarial == b.adversarial);
    pass &= same;
    notes.push(format!("pgd(1 step) ≡ fgsm: {same}"));

    let p = pgd(0.1, 10);
    let plain = pgd_linf(&model, &e.images, &goal, &p).unwrap();
    let eot = pgd_linf(
        &model,
        &e.images,
        &goal,
        &AttackConfig {
            eot: Eot::Samples(10),
            ..p
        },
    )
    .unwrap();
    // On a deterministic model every EOT draw is the same point.
    let same = plain.iter().zip(&eot).all(|(a, b)| a.adversarial == b.adversarial);
    pass &= same;
    notes.push(format!("eot(point mass) ≡ pgd: {same}"));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ordered = (0..1000).all(|_| {
        let (a, n) = (rng.random_range(1..6), rng.random_range(1..30));
        let m: Vec<Vec<f64>> = (0..a).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let r = best_per_image(&m).unwrap();
        r.mean_of_min <= r.min_of_mean
    });
    pass &= ordered;
    notes.push(format!("mean-of-min ≤ min-of-mean on 1000 matrices: {ordered}"));

    let x = Tensor::full(&[1, 16, 16, 1], 0.5);
    let linf = metrics::linf_distortion(&x, &x.map(|v| v + 8.0 / 256.0)).unwrap();
    pass &= linf == 0.03125;
    notes.push(format!("ℓ∞ of 8/256 = {linf}"));

    let rel = (1.45 / 784.0 - 0.0019f64).abs() / 0.0019;
    pass &= rel < 0.03;
    notes.push(format!("1.45/784 is {:.2}% from 0.0019", rel * 100.0));
    verdict(pass, notes.join("; "))
}

fn criterion_12(f: &Fixtures) -> Verdict {
    // The classifiers are shared with other criteria; only attacks are timed.
    let _ = (f.plain(), f.cnn(), f.adv(), f.pad());
    let start = Instant::now();
    let (e, goal) = f.eval(100);
    let unbounded = AttackConfig {
        step_size: Some(0.1),
        ..pgd(1.0, 20)
    };
    let stochastic = AttackConfig {
        success: SuccessCriterion::TEN_OF_TEN,
        ..unbounded.clone()
    };
    let configs: Vec<(&str, DefendedModel, AttackConfig)> = vec![
        ("mlp", DefendedModel::undefended(f.plain()), unbounded.clone()),
        ("cnn", DefendedModel::undefended(f.cnn()), unbounded.clone()),
        ("adversarially trained", DefendedModel::undefended(f.adv()), unbounded.clone()),
        (
            "rescale_pad",
            f.pad(),
            AttackConfig {
                eot: Eot::Enumerate,
                ..stochastic.clone()
            },
        ),
        (
            "sap",
            f.sap(),
            AttackConfig {
                eot: Eot::Samples(10),
                ..stochastic
            },
        ),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, m, cfg) in configs {
        let s = success(&pgd_linf(&m, &e.images, &goal, &cfg).unwrap());
        pass &= s == 1.0;
        notes.push(format!("{name} {s:.2}"));
    }
    let t = start.elapsed();
    verdict(pass && within(t, 120), format!("success at ε=1: {}; {t:.1?}", notes.join(", ")))
}

// ---------------------------------------------------------------------------

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; ignore them.
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let f = Fixtures::new();
    let mut failures = 0;
    let mut report = |id: &str, title: &str, v: Verdict| {
        if !v.pass {
            failures += 1;
        }
        println!("{} [{id}] {title}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    let guarded = |run: &dyn Fn() -> Verdict| {
        catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        })
    };
    type Single = fn(&Fixtures) -> Verdict;
    let singles: [(&str, &str, Single); 4] = [
        ("1", "autodiff matches finite differences", criterion_1),
        ("2", "override neutrality", criterion_2),
        ("3", "shattering witness and BPDA recovery", criterion_3),
        ("4", "thermometer + adversarial training ordering", criterion_4),
    ];
    for (id, title, c) in singles {
        if wanted(id) {
            report(id, title, guarded(&|| c(&f)));
        }
    }
    let more: [(&str, &str, Single); 3] = [
        ("5", "EOT versus single-draw on rescale_pad", criterion_5),
        ("6", "SAP circumvention", criterion_6),
        ("7", "input-transformation chain", criterion_7),
    ];
    for (id, title, c) in more {
        if wanted(id) {
            report(id, title, guarded(&|| c(&f)));
        }
    }
    if wanted("8") {
        match catch_unwind(AssertUnwindSafe(|| criterion_8(&f))) {
            Ok((a, b)) => {
                report("8a", "on-manifold reparameterized attack", a);
                report("8b", "BPDA through the projection defense", b);
            }
            Err(_) => {
                report("8a", "on-manifold reparameterized attack", verdict(false, "panicked"));
                report("8b", "BPDA through the projection defense", verdict(false, "panicked"));
            }
        }
    }
    let rest: [(&str, &str, Single); 4] = [
        ("9", "LID detector and high-confidence evasion", criterion_9),
        ("10", "diagnostics soundness", criterion_10),
        ("11", "exact identities", criterion_11),
        ("12", "unbounded success", criterion_12),
    ];
    for (id, title, c) in rest {
        if wanted(id) {
            report(id, title, guarded(&|| c(&f)));
        }
    }
    println!("{failures} criteria failed");
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
