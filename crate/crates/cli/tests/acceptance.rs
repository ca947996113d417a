//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary lines are always shown.
//! `ACCEPTANCE_ONLY=4,8` restricts the run to the listed criteria.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use legoformer::cp_fit::{cp_fit_oracle, DEFAULT_ITERATIONS};
use legoformer::eval::{evaluate_sweep, EvalConfig};
use legoformer::gradcheck::GradCheck;
use legoformer::image::GrayImage;
use legoformer::metrics::{fscore, surface_points, voxel_iou};
use legoformer::model::checkpoint::{encode_checkpoint, load_checkpoint};
use legoformer::model::{
    parameter_count, AttentionKind, LegoFormer, ModelConfig, ParameterBreakdown, PredictOptions,
    Prediction, Scheme, Variant,
};
use legoformer::seed::{derive_seed, Stream};
use legoformer::synth::{build_dataset, Dataset, DatasetConfig, LoadedObject, Split};
use legoformer::tape::MASK_FILL;
use legoformer::trainer::{mean_iou, TrainConfig, Trainer};
use legoformer::voxel::compose_factors;
use legoformer::{FactorSet, OccupancyGrid, Result as CoreResult, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

const TAU: f32 = 0.3;
const OVERFIT_SEED: u64 = 1;
const HELDOUT_SEED: u64 = 5;
const TRAIN_VIEWS: usize = 4;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: CoreResult<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Datasets and trained models shared between criteria.
struct Fixtures {
    dir: tempfile::TempDir,
    overfit: Option<Dataset>,
    heldout: Option<Dataset>,
    overfit_models: BTreeMap<String, LegoFormer>,
    heldout_models: BTreeMap<usize, LegoFormer>,
}

impl Fixtures {
    fn new() -> Self {
        Fixtures {
            dir: tempfile::tempdir().expect("temp dir"),
            overfit: None,
            heldout: None,
            overfit_models: BTreeMap::new(),
            heldout_models: BTreeMap::new(),
        }
    }

    fn dataset(&self, name: &str, objects: usize, seed: u64) -> Dataset {
        let path = self.dir.path().join(name);
        build_dataset(&DatasetConfig::balanced(objects, 8, seed), &path).expect("dataset builds");
        Dataset::load(&path).expect("dataset loads")
    }

    /// 10 objects, 8 of them in the train split.
    fn overfit_data(&mut self) -> &Dataset {
        if self.overfit.is_none() {
            self.overfit = Some(self.dataset("overfit", 10, OVERFIT_SEED));
        }
        self.overfit.as_ref().unwrap()
    }

    /// 200 objects: 160 train, 40 held out.
    fn heldout_data(&mut self) -> &Dataset {
        if self.heldout.is_none() {
            self.heldout = Some(self.dataset("heldout", 200, HELDOUT_SEED));
        }
        self.heldout.as_ref().unwrap()
    }

    /// Desk config trained on the 8 overfit objects; returns (model, seconds).
    fn overfit_model(&mut self, key: &str, cfg: ModelConfig) -> (LegoFormer, f64) {
        if let Some(m) = self.overfit_models.get(key) {
            return (m.clone(), 0.0);
        }
        let start = Instant::now();
        let data = self.overfit_data().split(Split::Train);
        let model = train(cfg, data, OVERFIT_SEED);
        let secs = start.elapsed().as_secs_f64();
        self.overfit_models.insert(key.to_string(), model.clone());
        (model, secs)
    }

    fn heldout_model(&mut self, k: usize) -> LegoFormer {
        if let Some(m) = self.heldout_models.get(&k) {
            return m.clone();
        }
        let data = self.heldout_data().split(Split::Train);
        let cfg = ModelConfig {
            n_queries: k,
            ..ModelConfig::default()
        };
        let start = Instant::now();
        let model = train(cfg, data, HELDOUT_SEED);
        println!(
            "    (trained held-out k={k} model in {:.0}s)",
            start.elapsed().as_secs_f64()
        );
        self.heldout_models.insert(k, model.clone());
        model
    }
}

/// Desk recipe: 2000 steps, batch 8, lr 0.01, 200 warmup steps, 4 fixed views.
fn train(cfg: ModelConfig, data: Vec<&LoadedObject>, seed: u64) -> LegoFormer {
    let model = LegoFormer::new(cfg, derive_seed(seed, Stream::Init, 0)).expect("model builds");
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, data, tc).expect("trainer builds");
    let out = t.run(None, |_| {}, |_, _| {}).expect("training finishes");
    let bad = out.log.iter().find(|r| !r.loss.is_finite());
    assert!(bad.is_none(), "non-finite loss at {:?}", bad);
    t.into_model()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> CoreResult<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, f32, f32, OpFn)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        (
            "add",
            s(&[&[2, 3, 4], &[3, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            s(&[&[2, 3, 4], &[4]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            s(&[&[2, 3, 4], &[3, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "scale",
            s(&[&[3, 5]]),
            -1.0,
            1.0,
            Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
        ),
        (
            "sigmoid",
            s(&[&[4, 5]]),
            -4.0,
            4.0,
            Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        ),
        (
            "relu",
            s(&[&[4, 5]]),
            -1.0,
            1.0,
            Box::new(|t, v| Ok(t.relu(v[0]))),
        ),
        (
            "clip_max",
            s(&[&[4, 5]]),
            0.0,
            2.0,
            Box::new(|t, v| Ok(t.clip_max(v[0], 1.0))),
        ),
        (
            "matmul",
            s(&[&[2, 3, 4], &[4, 5]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "softmax",
            s(&[&[3, 4, 5]]),
            -2.0,
            2.0,
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        (
            "layer_norm",
            s(&[&[3, 6], &[6], &[6]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "outer3",
            s(&[&[4], &[4], &[4]]),
            0.0,
            1.0,
            Box::new(|t, v| t.outer3(v[0], v[1], v[2])),
        ),
        (
            "compose_clipped",
            s(&[&[3, 4], &[3, 4], &[3, 4]]),
            0.0,
            1.0,
            Box::new(|t, v| t.compose_clipped(v[0], v[1], v[2])),
        ),
        (
            "reshape",
            s(&[&[2, 6]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        ),
        (
            "gather",
            s(&[&[2, 5]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.gather(v[0], vec![9, 0, 3, 3, 7, 1], &[2, 3])),
        ),
        (
            "permute",
            s(&[&[2, 3, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        (
            "transpose",
            s(&[&[2, 3, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.transpose(v[0])),
        ),
        (
            "concat",
            s(&[&[2, 3], &[2, 2]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        (
            "masked_fill",
            s(&[&[2, 3, 3]]),
            -1.0,
            1.0,
            Box::new(|t, v| {
                let m = t.masked_fill(
                    v[0],
                    &[false, true, false, false, false, true, true, false, false],
                    MASK_FILL,
                )?;
                t.softmax(m, 2)
            }),
        ),
        (
            "sum",
            s(&[&[3, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| Ok(t.sum(v[0]))),
        ),
        (
            "mean",
            s(&[&[3, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| Ok(t.mean(v[0]))),
        ),
        (
            "conv2d",
            s(&[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
        (
            "max_pool2",
            s(&[&[2, 2, 4, 4]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.max_pool2(v[0])),
        ),
        (
            "channel_affine",
            s(&[&[2, 3, 2, 2], &[3], &[3]]),
            -1.0,
            1.0,
            Box::new(|t, v| t.channel_affine(v[0], v[1], v[2])),
        ),
    ]
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        grid_side: 4,
        image_side: 8,
        d_model: 16,
        ff_dim: 16,
        n_layers: 1,
        n_heads: 2,
        n_queries: 2,
        conv_units: 1,
        conv_channels: 2,
        ..ModelConfig::default()
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst_op = (0.0f32, "");
    for (name, shapes, lo, hi, f) in op_cases() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| rand_tensor(&mut rng, s, lo, hi))
                .collect();
            let r = core(
                GradCheck {
                    seed,
                    ..GradCheck::default()
                }
                .run(&inputs, &f),
            )?;
            let e = r.max_rel_error();
            ensure(e < 1e-3, || {
                format!("{name} instance {seed}: relative error {e}")
            })?;
            if e > worst_op.0 {
                worst_op = (e, name);
            }
        }
    }
    let mut worst_e2e = 0.0f32;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = core(LegoFormer::new(toy_config(), seed))?;
        let views: Vec<GrayImage> = (0..2)
            .map(|_| GrayImage::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let batch = vec![views];
        let inputs = model.params().tensors().to_vec();
        let r = core(
            GradCheck {
                seed,
                ..GradCheck::default()
            }
            .run(&inputs, |t, v| {
                Ok(model.forward_on_tape(t, v, &batch, None, false)?.grids)
            }),
        )?;
        let e = r.global_rel_error();
        ensure(e < 1e-2, || {
            format!("end-to-end instance {seed}: relative error {e}")
        })?;
        ensure(r.skipped * 5 <= r.skipped + r.probes, || {
            format!(
                "end-to-end instance {seed}: {} of {} probes straddle kinks",
                r.skipped,
                r.skipped + r.probes
            )
        })?;
        worst_e2e = worst_e2e.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops x10 worst {:.1e} ({}), end-to-end x10 worst {:.1e}",
        op_cases().len(),
        worst_op.0,
        worst_op.1,
        worst_e2e
    ))
}

fn compose_oracle(f: &FactorSet) -> Vec<f64> {
    let n = f.side();
    let mut out = vec![0.0f64; n * n * n];
    for i in 0..f.k() {
        let (z, y, x) = f.factor(i);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    out[(a * n + b) * n + c] += z[a] as f64 * y[b] as f64 * x[c] as f64;
                }
            }
        }
    }
    out.into_iter().map(|v| v.min(1.0)).collect()
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 8;
    let mut worst = 0.0f64;
    for case in 0..100 {
        let k = 1 + case % 4;
        let mut m = || {
            (0..k * n)
                .map(|_| rng.random_range(0.0f32..=1.0))
                .collect::<Vec<_>>()
        };
        let f = FactorSet::new(n, m(), m(), m()).unwrap();
        let got = compose_factors(&f);
        for (a, b) in got.values().iter().zip(compose_oracle(&f)) {
            worst = worst.max((*a as f64 - b).abs());
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let permuted = compose_factors(&f.select(&order).unwrap());
        let d = got
            .values()
            .iter()
            .zip(permuted.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        ensure(d <= 1e-6, || {
            format!("case {case}: permutation changed output by {d}")
        })?;
        if k == 1 {
            continue;
        }
        let fewer = compose_factors(&f.select(&order[..k - 1]).unwrap());
        ensure(
            fewer.values().iter().zip(got.values()).all(|(a, b)| a <= b),
            || format!("case {case}: dropping a factor increased a voxel"),
        )?;
    }
    ensure(worst <= 1e-6, || {
        format!("max deviation from oracle {worst:e}")
    })?;
    Ok(format!("100 sets, max deviation {worst:.1e}"))
}

fn box_grid(n: usize, boxes: &[([usize; 3], [usize; 3])]) -> OccupancyGrid {
    OccupancyGrid::from_fn(n, |z, y, x| {
        boxes.iter().any(|(o, e)| {
            (o[0]..o[0] + e[0]).contains(&z)
                && (o[1]..o[1] + e[1]).contains(&y)
                && (o[2]..o[2] + e[2]).contains(&x)
        }) as u8 as f32
    })
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let rand_box = |rng: &mut ChaCha8Rng| {
        let o: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..12));
        let e: [usize; 3] = std::array::from_fn(|a| rng.random_range(1..=n - o[a]));
        (o, e)
    };
    let mut fits = 0;
    for i in 0..5 {
        let b = rand_box(&mut rng);
        let g = box_grid(n, &[b]);
        let fit = core(cp_fit_oracle(&g, 1, DEFAULT_ITERATIONS, i))?;
        ensure(fit.iou == 1.0, || format!("box {b:?}: IoU {}", fit.iou))?;
        fits += 1;
    }
    for i in 0..5 {
        // Vertical bar plus a horizontal foot sharing its corner.
        let o: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..6));
        let (h, w, t) = (
            rng.random_range(5..10),
            rng.random_range(5..10),
            rng.random_range(2..5),
        );
        let boxes = [(o, [t, h, t]), (o, [t, t, w])];
        let g = box_grid(n, &boxes);
        let fit = core(cp_fit_oracle(&g, 2, DEFAULT_ITERATIONS, 100 + i))?;
        ensure(fit.iou == 1.0, || {
            format!("L-shape {boxes:?}: IoU {}", fit.iou)
        })?;
        fits += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{fits} fits at IoU 1.0 in {secs:.1}s"))
}

fn criterion_4(fx: &mut Fixtures) -> Check {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (scheme, bar) in [
        (Scheme::Factors, 0.90),
        (Scheme::NaiveNar, 0.85),
        (Scheme::NaiveFull, 0.85),
        (Scheme::Naive, 0.85),
    ] {
        let cfg = ModelConfig {
            scheme,
            ..ModelConfig::default()
        };
        let (model, secs) = fx.overfit_model(&scheme.to_string(), cfg);
        let data = fx.overfit_data().split(Split::Train);
        let iou = core(mean_iou(&model, &data, TRAIN_VIEWS, TAU, true))?;
        let mut line = format!("{scheme} {iou:.4} in {secs:.0}s");
        if scheme == Scheme::Naive {
            let free = core(mean_iou(&model, &data, TRAIN_VIEWS, TAU, false))?;
            line.push_str(&format!(" (free-running {free:.4})"));
        }
        println!("    {line}");
        if iou < bar || secs >= 900.0 {
            failures.push(format!("{scheme} IoU {iou:.4} (needs {bar}) in {secs:.0}s"));
        }
        parts.push(line);
    }
    if failures.is_empty() {
        Ok(parts.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

fn sweep(
    model: &LegoFormer,
    objects: &[&LoadedObject],
    views: Vec<usize>,
) -> Result<Vec<f64>, String> {
    let cfg = EvalConfig {
        view_counts: views,
        ..EvalConfig::default()
    };
    let report = core(evaluate_sweep(
        model,
        "acceptance",
        "heldout",
        objects,
        &cfg,
    ))?;
    Ok(report.per_view_count.iter().map(|r| r.mean_iou).collect())
}

fn criterion_5(fx: &mut Fixtures) -> Check {
    let model = fx.heldout_model(8);
    let test = fx.heldout_data().split(Split::Test);
    ensure(test.len() == 40, || {
        format!("held-out set has {} objects", test.len())
    })?;
    let ious = sweep(&model, &test, vec![1, 2, 4, 8])?;
    let line = format!(
        "IoU at 1/2/4/8 views: {:.4}/{:.4}/{:.4}/{:.4}",
        ious[0], ious[1], ious[2], ious[3]
    );
    for w in ious.windows(2) {
        ensure(w[1] >= w[0] - 0.02, || line.clone())?;
    }
    Ok(line)
}

fn criterion_6(fx: &mut Fixtures) -> Check {
    let model = fx.heldout_model(8);
    let test = fx.heldout_data().split(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f32;
    for o in test.iter().take(10) {
        let base = core(model.predict(&o.views, PredictOptions::default()))?.grid;
        for _ in 0..10 {
            let mut views = o.views.clone();
            views.shuffle(&mut rng);
            let g = core(model.predict(&views, PredictOptions::default()))?.grid;
            let d = base
                .values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            worst = worst.max(d);
        }
    }
    ensure(worst <= 1e-5, || format!("max difference {worst:e}"))?;
    Ok(format!(
        "10 objects x 10 permutations of 8 views, max difference {worst:.1e}"
    ))
}

fn criterion_7(fx: &mut Fixtures) -> Check {
    let mut iou = BTreeMap::new();
    for k in [2, 4, 8] {
        let model = fx.heldout_model(k);
        let test = fx.heldout_data().split(Split::Test);
        iou.insert(k, sweep(&model, &test, vec![TRAIN_VIEWS])?[0]);
    }
    let line = format!(
        "held-out IoU at 4 views: k=2 {:.4}, k=4 {:.4}, k=8 {:.4}",
        iou[&2], iou[&4], iou[&8]
    );
    ensure(iou[&8] >= iou[&2] - 0.01, || line.clone())?;
    ensure((iou[&2] - iou[&8]).abs() <= 0.1, || line.clone())?;
    Ok(line)
}

fn criterion_8(fx: &mut Fixtures) -> Check {
    for layers in [1, 2, 3, 4, 6] {
        let plain = ModelConfig {
            n_layers: layers,
            ..ModelConfig::default()
        };
        let shared = ModelConfig {
            share_layer_weights: true,
            ..plain.clone()
        };
        let (a, b) = (
            ParameterBreakdown::of(&plain),
            ParameterBreakdown::of(&shared),
        );
        ensure(
            a.transformer_layers() == layers * b.transformer_layers(),
            || {
                format!(
                    "{layers} layers: {} vs {} shared",
                    a.transformer_layers(),
                    b.transformer_layers()
                )
            },
        )?;
        ensure(
            parameter_count(&plain) - parameter_count(&shared)
                == (layers - 1) * b.transformer_layers(),
            || format!("{layers} layers: totals differ by more than the layer stack"),
        )?;
        let enumerated: usize = core(LegoFormer::new(shared.clone(), 0))?
            .params()
            .tensors()
            .iter()
            .map(Tensor::len)
            .sum();
        ensure(enumerated == parameter_count(&shared), || {
            format!(
                "{layers} layers: count {} vs {enumerated} initialized",
                parameter_count(&shared)
            )
        })?;
    }
    let cfg = ModelConfig {
        share_layer_weights: true,
        ..ModelConfig::default()
    };
    let (model, secs) = fx.overfit_model("shared", cfg);
    let data = fx.overfit_data().split(Split::Train);
    let iou = core(mean_iou(&model, &data, TRAIN_VIEWS, TAU, true))?;
    let line = format!(
        "parameter counts exact for 1-6 layers; shared 2-layer train IoU {iou:.4} in {secs:.0}s"
    );
    ensure(iou >= 0.85, || line.clone())?;
    Ok(line)
}

fn occupied(g: &OccupancyGrid) -> HashSet<(usize, usize, usize)> {
    let n = g.side();
    let mut s = HashSet::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                if g.get(z, y, x) == 1.0 {
                    s.insert((z, y, x));
                }
            }
        }
    }
    s
}

fn surface_oracle(g: &OccupancyGrid) -> Vec<[f64; 3]> {
    let n = g.side() as isize;
    let cells = occupied(g);
    let has = |z: isize, y: isize, x: isize| {
        z >= 0 && y >= 0 && x >= 0 && cells.contains(&(z as usize, y as usize, x as usize))
    };
    let mut out = Vec::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                if !has(z, y, x) {
                    continue;
                }
                let exposed = !(has(z - 1, y, x)
                    && has(z + 1, y, x)
                    && has(z, y - 1, x)
                    && has(z, y + 1, x)
                    && has(z, y, x - 1)
                    && has(z, y, x + 1));
                if exposed {
                    let c = |i: isize| (i as f64 + 0.5) / n as f64;
                    out.push([c(z), c(y), c(x)]);
                }
            }
        }
    }
    out
}

fn fscore_oracle(p: &[[f64; 3]], g: &[[f64; 3]], d: f64) -> f64 {
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let frac = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        if from.is_empty() {
            return 0.0;
        }
        let hit = |a: &[f64; 3]| {
            to.iter()
                .any(|b| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt() < d)
        };
        from.iter().filter(|a| hit(a)).count() as f64 / from.len() as f64
    };
    let (pr, rc) = (frac(p, g), frac(g, p));
    if pr + rc == 0.0 {
        0.0
    } else {
        2.0 * pr * rc / (pr + rc)
    }
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let grid = |rng: &mut ChaCha8Rng| {
            let density = rng.random_range(0.05..0.6);
            OccupancyGrid::from_fn(8, |_, _, _| rng.random_bool(density) as u8 as f32)
        };
        let (a, b) = (grid(&mut rng), grid(&mut rng));
        let (sa, sb) = (occupied(&a), occupied(&b));
        let union = sa.union(&sb).count();
        let want = if union == 0 {
            1.0
        } else {
            sa.intersection(&sb).count() as f64 / union as f64
        };
        worst = worst.max((core(voxel_iou(&a, &b))? - want).abs());
        let (pa, pb) = (surface_points(&a), surface_points(&b));
        ensure(
            pa.points == surface_oracle(&a) && pb.points == surface_oracle(&b),
            || format!("pair {i}: surface points differ from neighbor scan"),
        )?;
        let d = [0.01, 0.13, 0.2, 0.3][i % 4];
        worst = worst
            .max((core(fscore(&pa, &pb, d))? - fscore_oracle(&pa.points, &pb.points, d)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "200 pairs, max deviation {worst:.1e}, surfaces exact"
    ))
}

fn check_attention(label: &str, model: &LegoFormer, views: &[GrayImage]) -> Result<usize, String> {
    let plain = core(model.predict(views, PredictOptions::default()))?;
    let captured: Prediction = core(model.predict(
        views,
        PredictOptions {
            capture: true,
            teacher: None,
        },
    ))?;
    ensure(plain.grid == captured.grid, || {
        format!("{label}: capture changed the output")
    })?;
    ensure(!captured.attention.is_empty(), || {
        format!("{label}: nothing captured")
    })?;
    let scheme = model.config().scheme;
    for r in &captured.attention {
        for i in 0..r.rows {
            let row = r.row(i);
            let s: f32 = row.iter().sum();
            let fully_masked =
                r.kind == AttentionKind::DecoderDecoder && scheme == Scheme::Factors && r.cols == 1;
            if !fully_masked {
                ensure((s - 1.0).abs() <= 1e-5, || {
                    format!("{label}: {:?} row sums to {s}", r.kind)
                })?;
            }
            if r.kind == AttentionKind::DecoderDecoder {
                if scheme == Scheme::Factors {
                    ensure(row[i] == 0.0, || {
                        format!("{label}: nonzero decoder diagonal")
                    })?;
                }
                if scheme == Scheme::Naive {
                    ensure(row[i + 1..].iter().all(|&v| v == 0.0), || {
                        format!("{label}: attention to a later step")
                    })?;
                }
            }
        }
    }
    Ok(captured.attention.len())
}

fn criterion_10(fx: &mut Fixtures) -> Check {
    let views = fx.overfit_data().objects[0].views[..TRAIN_VIEWS].to_vec();
    let mut records = 0;
    for scheme in [Scheme::Factors, Scheme::Naive] {
        let (model, _) = fx.overfit_model(
            &scheme.to_string(),
            ModelConfig {
                scheme,
                ..ModelConfig::default()
            },
        );
        records += check_attention(&format!("trained {scheme}"), &model, &views)?;
    }
    for scheme in [Scheme::NaiveNar, Scheme::NaiveFull] {
        let model = core(LegoFormer::new(
            ModelConfig {
                scheme,
                ..ModelConfig::default()
            },
            10,
        ))?;
        records += check_attention(&format!("fresh {scheme}"), &model, &views)?;
    }
    let single = ModelConfig {
        variant: Variant::SingleView,
        patch_side: 1,
        ..ModelConfig::default()
    };
    let model = core(LegoFormer::new(single, 10))?;
    records += check_attention("single-view", &model, &views[..1])?;
    let one_query = core(LegoFormer::new(
        ModelConfig {
            n_queries: 1,
            ..ModelConfig::default()
        },
        10,
    ))?;
    records += check_attention("k=1", &one_query, &views)?;
    Ok(format!("{records} attention maps checked over 6 models"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_legoformer"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_11(fx: &Fixtures) -> Check {
    let root = fx.dir.path().join("repro");
    let p = |x: &PathBuf| x.to_str().unwrap().to_string();
    let run_once = |tag: &str| -> Result<PathBuf, String> {
        let base = root.join(tag);
        let (data, run, eval) = (base.join("data"), base.join("run"), base.join("eval"));
        cli(&[
            "generate-data",
            "--objects",
            "12",
            "--views",
            "4",
            "--seed",
            "11",
            "--out",
            &p(&data),
        ])?;
        cli(&[
            "train",
            "--data",
            &p(&data),
            "--steps",
            "40",
            "--warmup",
            "10",
            "--seed",
            "11",
            "--deterministic",
            "--threads",
            "1",
            "--checkpoint-every",
            "20",
            "--out",
            &p(&run),
        ])?;
        cli(&[
            "eval",
            "--checkpoint",
            &p(&run.join("step-40.lgfc")),
            "--data",
            &p(&data),
            "--views",
            "1,2,4",
            "--deterministic",
            "--threads",
            "1",
            "--out",
            &p(&eval),
        ])?;
        Ok(base)
    };
    let (a, b) = (run_once("a")?, run_once("b")?);
    for file in [
        "data/manifest.json",
        "run/train_log.csv",
        "run/step-20.lgfc",
        "run/step-40.lgfc",
    ] {
        ensure(read(&a.join(file))? == read(&b.join(file))?, || {
            format!("{file} differs between runs")
        })?;
    }
    // Reports embed their input paths; compare with those normalized.
    let report = |base: &Path| -> Result<String, String> {
        let text =
            String::from_utf8(read(&base.join("eval/report.json"))?).map_err(|e| e.to_string())?;
        Ok(text.replace(base.to_str().unwrap(), "<base>"))
    };
    ensure(report(&a)? == report(&b)?, || "eval reports differ".into())?;

    let ck = a.join("run/step-40.lgfc");
    let bytes = read(&ck)?;
    let loaded = core(load_checkpoint(&ck, None))?;
    ensure(
        encode_checkpoint(&loaded.model, &loaded.extra) == bytes,
        || "re-encoded checkpoint differs".into(),
    )?;
    let again = core(load_checkpoint(&ck, Some(loaded.model.config())))?;
    let ds = core(Dataset::load(&a.join("data")))?;
    let views = &ds.objects[0].views[..TRAIN_VIEWS];
    let (x, y) = (
        core(loaded.model.predict(views, PredictOptions::default()))?,
        core(again.model.predict(views, PredictOptions::default()))?,
    );
    ensure(x.grid == y.grid, || {
        "reloaded checkpoint predicts differently".into()
    })?;
    let tree = |base: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut files = Vec::new();
        let mut stack = vec![base.join("data")];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).map_err(|e| e.to_string())? {
                let path = e.map_err(|e| e.to_string())?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let mut bytes = read(&path)?;
                    if path
                        .file_name()
                        .is_some_and(|f| f == "effective_config.txt")
                    {
                        let text = String::from_utf8_lossy(&bytes);
                        bytes = text.replace(base.to_str().unwrap(), "<base>").into_bytes();
                    }
                    files.push((
                        path.strip_prefix(base).unwrap().display().to_string(),
                        bytes,
                    ));
                }
            }
        }
        files.sort();
        Ok(files)
    };
    ensure(tree(&a)? == tree(&b)?, || {
        "dataset files differ beyond their output paths".into()
    })?;
    Ok(
        "dataset, loss log, checkpoints and report byte-identical; checkpoint round-trip exact"
            .into(),
    )
}

fn main() -> ExitCode {
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut fx = Fixtures::new();
    let names = [
        "gradient suite",
        "composition oracle",
        "CP representability",
        "overfit reproduction",
        "view-count trend",
        "permutation invariance",
        "query-count trend",
        "weight sharing",
        "metric oracles",
        "attention contracts",
        "reproducibility",
    ];
    let mut results = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let id = i as u32 + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        println!("criterion {id} ({name}) running");
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut fx),
            5 => criterion_5(&mut fx),
            6 => criterion_6(&mut fx),
            7 => criterion_7(&mut fx),
            8 => criterion_8(&mut fx),
            9 => criterion_9(),
            10 => criterion_10(&mut fx),
            _ => criterion_11(&fx),
        }))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => format!("FAIL criterion {id} ({name}): {detail} [{secs:.1}s]"),
        };
        println!("{line}");
        results.push((line, outcome.is_ok()));
    }
    println!("\nacceptance summary");
    for (line, _) in &results {
        println!("{line}");
    }
    if results.iter().all(|r| r.1) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
