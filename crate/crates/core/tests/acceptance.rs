//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hetmerge::depth::{self, AlignMethod};
use hetmerge::eval::{barrier_grid, joint_loss};
use hetmerge::merger::{reexpress_in_a_basis, DepthTag};
use hetmerge::toy::{calibration_batch, mlp_arch};
use hetmerge::width::UnmergeMode;
use hetmerge::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------- independent helpers ----------

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], m: &Matrix) -> f64 {
    let mut d: f64 = 0.0;
    assert_eq!((a.len(), a[0].len()), m.shape());
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            d = d.max((v - m.get(i, j)).abs());
        }
    }
    d
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `P[i][pi[i]] = 1`: reorders B's neurons into A's order.
fn perm_matrix(pi: &[usize]) -> Vec<Vec<f64>> {
    let n = pi.len();
    (0..n)
        .map(|i| (0..n).map(|j| if pi[i] == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn eye(n: usize) -> Vec<Vec<f64>> {
    perm_matrix(&(0..n).collect::<Vec<_>>())
}

fn lin(a: &[Vec<f64>], b: &[Vec<f64>], wa: f64, wb: f64) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| wa * x + wb * y).collect())
        .collect()
}

fn grid(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.to_vec()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn head(task: u32, labels: Vec<u32>, weight: Matrix) -> Head {
    let n = labels.len();
    Head {
        task,
        labels,
        weight,
        bias: vec![0.0; n],
    }
}

fn bundle(layers: Vec<(LayerSpec, Matrix, Vec<f64>)>, heads: Vec<Head>) -> ModelBundle {
    let layers = layers
        .into_iter()
        .map(|(s, w, b)| Layer::new(s, w, b).unwrap())
        .collect();
    ModelBundle::new(layers, heads, Map::new()).unwrap()
}

fn random_bundle(rng: &mut ChaCha8Rng, specs: &[LayerSpec], task: u32, classes: usize) -> ModelBundle {
    let layers = specs
        .iter()
        .map(|s| {
            let bound = (3.0 / s.in_dim as f64).sqrt();
            let w = Matrix::from_fn(s.out_dim, s.in_dim, |_, _| rng.random_range(-bound..bound));
            let b = (0..s.out_dim).map(|_| rng.random_range(-0.3..0.3)).collect();
            (*s, w, b)
        })
        .collect();
    let width = specs.last().unwrap().out_dim;
    let labels = (0..classes as u32).map(|c| task * 100 + c).collect();
    let hw = Matrix::from_fn(classes, width, |_, _| rng.random_range(-1.0..1.0));
    bundle(layers, vec![head(task, labels, hw)])
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

/// Clone of `a` with every hidden layer's neurons shuffled. Head task ids
/// are shifted by `task_offset` so both models can live in one bundle.
fn permuted_clone(a: &ModelBundle, rng: &mut ChaCha8Rng, task_offset: u32) -> ModelBundle {
    let mut prev: Option<IndexPermutation> = None;
    let mut layers = Vec::new();
    for l in &a.layers {
        let mut p: Vec<usize> = (0..l.spec.out_dim).collect();
        p.shuffle(rng);
        let ip = IndexPermutation::new(p).unwrap();
        let mut w = ip.apply_rows(&l.weight).unwrap();
        if let Some(pp) = &prev {
            w = pp.apply_cols(&w).unwrap();
        }
        layers.push(Layer::new(l.spec, w, ip.apply_vec(&l.bias)).unwrap());
        prev = Some(ip);
    }
    let last = prev.unwrap();
    let heads = a
        .heads
        .iter()
        .map(|h| Head {
            task: h.task + task_offset,
            labels: h.labels.iter().map(|l| l + 1000).collect(),
            weight: last.apply_cols(&h.weight).unwrap(),
            bias: h.bias.clone(),
        })
        .collect();
    ModelBundle::new(layers, heads, Map::new()).unwrap()
}

// ---------- criterion 1: DP vs exhaustive search ----------

/// Lattice-path score: diagonal steps at `seq`, horizontal steps after each
/// diagonal credit the previous shallow layer (LMA only), tail runs to `m`.
fn lattice_score(c: &Matrix, seq: &[usize], m: usize, lma: bool) -> f64 {
    let at = |j: usize, i: usize| if i == 0 { 0.0 } else { c.get(j - 1, i - 1) };
    let mut s = 0.0;
    for (k, &col) in seq.iter().enumerate() {
        s += at(col, k + 1);
        if lma {
            let stop = if k + 1 < seq.len() { seq[k + 1] - 1 } else { m };
            for j in col + 1..=stop {
                s += at(j, k);
            }
        }
    }
    s
}

fn exhaustive_best(c: &Matrix, n: usize, m: usize, lma: bool) -> f64 {
    fn rec(c: &Matrix, n: usize, m: usize, lma: bool, seq: &mut Vec<usize>, best: &mut f64) {
        if seq.len() == n {
            *best = best.max(lattice_score(c, seq, m, lma));
            return;
        }
        let lo = seq.last().map_or(1, |v| v + 1);
        let hi = m - (n - seq.len() - 1);
        for v in lo..=hi {
            seq.push(v);
            rec(c, n, m, lma, seq, best);
            seq.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    rec(c, n, m, lma, &mut Vec::new(), &mut best);
    best
}

fn plan_ok(plan: &SegmentPlan, n: usize, m: usize) -> bool {
    let g = &plan.g;
    plan.validate(m).is_ok()
        && g.len() == n
        && g[0] == 1
        && *g.last().unwrap() == m
        && g.windows(2).all(|w| w[0] < w[1])
        && g.iter().enumerate().all(|(i, &v)| v > i && v <= m - (n - 1 - i))
        && plan.segment_lengths().iter().sum::<usize>() == m
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut bad = Vec::new();
    let mut same_g = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..500 {
        let m = rng.random_range(2..=9);
        let n = rng.random_range(2..=m.min(5));
        let c = Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        let sim = LayerSimMatrix::from_values(c.clone());
        for obj in [Objective::Sma, Objective::Lma] {
            let dp = match obj {
                Objective::Sma => sma_align(&sim).unwrap(),
                Objective::Lma => lma_align(&sim).unwrap(),
            };
            let oracle = brute_force_align(&sim, obj).unwrap();
            let local = exhaustive_best(&c, n, m, obj == Objective::Lma);
            let d = (dp.score - oracle.score).abs().max((dp.score - local).abs());
            worst = worst.max(d);
            if d > 1e-12 || !plan_ok(&dp, n, m) || !plan_ok(&oracle, n, m) {
                bad.push(format!("trial {trial} {obj} {m}x{n}"));
            }
            same_g += usize::from(dp.g == oracle.g);
        }
    }
    let took = start.elapsed();
    let pass = bad.is_empty() && took < Duration::from_secs(30);
    Outcome::new(
        pass,
        format!(
            "1000 alignments, max score gap {worst:.1e}, plan mismatches with oracle tie-break {}, failures {:?}, {:.2?}",
            1000 - same_g,
            &bad[..bad.len().min(5)],
            took
        ),
    )
}

// ---------- criterion 2: CKA invariances ----------

/// HSIC-style CKA with an explicit centering matrix. Rows are neurons,
/// columns samples.
fn cka_oracle(x: &Matrix, y: &Matrix) -> f64 {
    let n = x.cols();
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64).collect())
        .collect();
    let gram = |m: &Matrix| {
        let r = rows_of(m);
        mm(&transpose(&r), &r)
    };
    let (kx, ky) = (gram(x), gram(y));
    let (cx, cy) = (mm(&mm(&h, &kx), &h), mm(&mm(&h, &ky), &h));
    let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter().flatten().zip(b.iter().flatten()).map(|(p, q)| p * q).sum()
    };
    dot(&cx, &cy) / (dot(&cx, &cx) * dot(&cy, &cy)).sqrt()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst = [0.0f64; 5];
    for _ in 0..50 {
        let samples = rng.random_range(8..40);
        let (dx, dy) = (rng.random_range(2..12), rng.random_range(2..12));
        let x = Matrix::from_fn(dx, samples, |_, _| rng.random_range(-1.0..1.0));
        // partially related pair
        let mix = Matrix::from_fn(dy, dx, |_, _| rng.random_range(-1.0..1.0));
        let noise = Matrix::from_fn(dy, samples, |_, _| rng.random_range(-0.5..0.5));
        let y = to_matrix(&lin(&mm(&rows_of(&mix), &rows_of(&x)), &rows_of(&noise), 1.0, 1.0));
        let base = linear_cka(&x, &y).unwrap();

        worst[0] = worst[0].max((linear_cka(&x, &x).unwrap() - 1.0).abs());
        let mut px: Vec<usize> = (0..dx).collect();
        let mut py: Vec<usize> = (0..dy).collect();
        px.shuffle(&mut rng);
        py.shuffle(&mut rng);
        let xp = IndexPermutation::new(px).unwrap().apply_rows(&x).unwrap();
        let yp = IndexPermutation::new(py).unwrap().apply_rows(&y).unwrap();
        worst[1] = worst[1].max((linear_cka(&xp, &yp).unwrap() - base).abs());
        let (sx, sy) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        worst[2] = worst[2].max((linear_cka(&x.scale(sx), &y.scale(sy)).unwrap() - base).abs());
        worst[3] = worst[3].max((linear_cka(&y, &x).unwrap() - base).abs());
        worst[4] = worst[4].max((cka_oracle(&x, &y) - base).abs());
    }
    let pass = worst[0] <= 1e-10 && worst[1] <= 1e-10 && worst[2] <= 1e-10 && worst[3] <= 1e-12 && worst[4] <= 1e-10;
    Outcome::new(
        pass,
        format!(
            "50 pairs: self {:.1e}, permutation {:.1e}, scale {:.1e}, symmetry {:.1e}, vs centering-matrix oracle {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------- criterion 3: extension equivalence ----------

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut identity_worst: f64 = 0.0;
    let mut zero_worst: f64 = 0.0;
    for trial in 0..20 {
        let depth = rng.random_range(1..=4);
        let residual = trial % 2 == 1;
        let specs = mlp_arch(7, 12, depth, residual);
        let model = random_bundle(&mut rng, &specs, 0, 4);
        let lengths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=3)).collect();
        let x = random_inputs(&mut rng, 256, 7);
        let base = model.forward(&x, HeadSelect::All).unwrap();
        for mode in [ExtensionMode::IdentityDense, ExtensionMode::ZeroResidual] {
            let plan = ExtensionPlan::from_segment_lengths(&lengths, mode).unwrap();
            let ext = extend_model(&model, &plan).unwrap();
            assert_eq!(ext.depth(), lengths.iter().sum::<usize>());
            let d = ext.forward(&x, HeadSelect::All).unwrap().max_abs_diff(&base);
            match mode {
                ExtensionMode::IdentityDense => identity_worst = identity_worst.max(d),
                ExtensionMode::ZeroResidual => zero_worst = zero_worst.max(d),
            }
        }
    }
    Outcome::new(
        identity_worst < 1e-6 && zero_worst == 0.0,
        format!("20 models x 256 inputs: identity max-abs {identity_worst:.1e}, zero-residual max-abs {zero_worst:.1e}"),
    )
}

// ---------- criterion 4: self-merge recovery ----------

fn trained_pair_material(seed: u64) -> (ModelBundle, Dataset, CalibrationBatch) {
    let spec = TaskSpec::default();
    let data = gen_tasks(&spec, seed).unwrap();
    let t = &data.tasks[0];
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let model = train_mlp(&mlp_arch(spec.input_dim, 32, 3, false), 0, &t.task.labels, &t.train, &cfg)
        .unwrap()
        .model;
    let batch = calibration_batch(&data.joint_train, 512, seed).unwrap();
    (model, data.joint_test, batch)
}

fn criterion_4() -> Outcome {
    let (a, test, batch) = trained_pair_material(41);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let x = test.select(&(0..256).collect::<Vec<_>>()).x;
    let ya = a.forward(&x, HeadSelect::Task(0)).unwrap();
    let mut identity_err: f64 = 0.0;
    let mut check = |merged: &ModelBundle, recipe: &MergeRecipe| {
        let e0 = merged.forward(&x, HeadSelect::Task(0)).unwrap().max_abs_diff(&ya);
        let e1 = merged.forward(&x, HeadSelect::Task(1)).unwrap().max_abs_diff(&ya);
        identity_err = identity_err.max(recipe.alignment.as_ref().unwrap().identity_error().unwrap());
        e0.max(e1)
    };

    let b = permuted_clone(&a, &mut rng, 1);
    let opts = RecipeOptions::new(MergeStrategy::AlignedAvg, None, ExtensionMode::IdentityDense);
    let recipe = prepare_recipe(&a, &b, &batch, &opts).unwrap();
    let merged = aligned_average(&a, &b, recipe.alignment.as_ref().unwrap()).unwrap();
    let permute_err = check(&merged, &recipe);

    let mut twin = a.clone();
    for h in &mut twin.heads {
        h.task += 1;
        h.labels.iter_mut().for_each(|l| *l += 1000);
    }
    let mut opts = RecipeOptions::new(MergeStrategy::Zip, None, ExtensionMode::IdentityDense);
    opts.align = AlignOptions::zip(Some(a.hidden_dim()));
    let recipe = prepare_recipe(&a, &twin, &batch, &opts).unwrap();
    let merged = merge_models(&a, &twin, &recipe).unwrap();
    let zip_err = check(&merged, &recipe);

    Outcome::new(
        permute_err <= 1e-4 && zip_err <= 1e-4 && identity_err <= 1e-12,
        format!(
            "permuted clone {permute_err:.1e}, zipped clone (r = {}) {zip_err:.1e}, merge*unmerge - I {identity_err:.1e}",
            a.hidden_dim()
        ),
    )
}

// ---------- criterion 5: hand-arithmetic conformance ----------

fn pair_groups(pi: &[usize]) -> Vec<Vec<usize>> {
    let n = pi.len();
    pi.iter().enumerate().map(|(i, &j)| vec![i, n + j]).collect()
}

fn recipe_for(maps: Vec<MergeMap>, input_dim: usize, mode: ExtensionMode) -> MergeRecipe {
    MergeRecipe {
        strategy: MergeStrategy::AlignedAvg,
        depth_method: DepthTag::Sma,
        depth: SegmentPlan {
            method: AlignMethod::Sma,
            g: vec![2],
            score: 0.0,
        },
        alignment: Some(AlignmentPlan::from_maps(Strategy::Permute, input_dim, maps)),
        extension: mode,
        scales: (0.5, 0.5),
        model_a: String::new(),
        model_b: String::new(),
        batch: String::new(),
    }
}

/// Features of B are A's features with rows shuffled; returns the pairing
/// matched from them.
fn planted_pairing(rng: &mut ChaCha8Rng, pi: &[usize]) -> Vec<usize> {
    let n = pi.len();
    let fa = Matrix::from_fn(n, 30, |_, _| rng.random_range(-1.0..1.0));
    // B neuron pi[i] carries A neuron i
    let mut fb = Matrix::zeros(n, 30);
    for (i, &j) in pi.iter().enumerate() {
        fb.row_mut(j).copy_from_slice(fa.row(i));
    }
    permutation_match(&fa, &fb, (0.5, 0.5)).unwrap().pairing().unwrap()
}

/// A has two layers, B one; B's layer pairs with A's first layer.
fn hand_case(
    rng: &mut ChaCha8Rng,
    wa: [Vec<Vec<f64>>; 2],
    ba: [Vec<f64>; 2],
    wb: Vec<Vec<f64>>,
    bb: Vec<f64>,
    pis: [Vec<usize>; 2],
    residual: bool,
) -> f64 {
    let d = wb.len();
    let stem = LayerSpec::dense(d, d, Activation::Relu);
    let second = if residual {
        LayerSpec::residual(d, Activation::Relu)
    } else {
        stem
    };
    let labels = |t: u32| (0..d as u32).map(|c| t * 10 + c).collect::<Vec<_>>();
    let a = bundle(
        vec![
            (stem, to_matrix(&wa[0]), ba[0].clone()),
            (second, to_matrix(&wa[1]), ba[1].clone()),
        ],
        vec![head(0, labels(0), Matrix::identity(d))],
    );
    let hb = (0..d).map(|i| (0..d).map(|j| (i * d + j) as f64).collect()).collect::<Vec<Vec<f64>>>();
    let b = bundle(vec![(stem, to_matrix(&wb), bb.clone())], vec![head(1, labels(1), to_matrix(&hb))]);

    let found: Vec<Vec<usize>> = pis.iter().map(|p| planted_pairing(rng, p)).collect();
    assert_eq!(found.as_slice(), pis.as_slice(), "matching failed to recover the planted pairing");
    let maps = found
        .iter()
        .map(|p| MergeMap::from_groups(pair_groups(p), d, d, (0.5, 0.5), UnmergeMode::Membership).unwrap())
        .collect();
    let (mode, merged) = if residual {
        let r = recipe_for(maps, d, ExtensionMode::ZeroResidual);
        (r.extension, merge_depth_hetero_residual(&a, &b, &r).unwrap())
    } else {
        let r = recipe_for(maps, d, ExtensionMode::IdentityDense);
        (r.extension, merge_depth_hetero(&a, &b, &r).unwrap())
    };

    let (p0, p1, p2) = (eye(d), perm_matrix(&pis[0]), perm_matrix(&pis[1]));
    let b_internal = match mode {
        ExtensionMode::IdentityDense => eye(d),
        ExtensionMode::ZeroResidual => vec![vec![0.0; d]; d],
    };
    // W*_k = 1/2 (W^A_k + P_k W^B_k P_{k-1}^T), b*_k = 1/2 (b^A_k + P_k b^B_k)
    let w1 = lin(&wa[0], &mm(&mm(&p1, &wb), &transpose(&p0)), 0.5, 0.5);
    let w2 = lin(&wa[1], &mm(&mm(&p2, &b_internal), &transpose(&p1)), 0.5, 0.5);
    let pb = mm(&p1, &bb.iter().map(|v| vec![*v]).collect::<Vec<_>>());
    let b1: Vec<f64> = ba[0].iter().zip(&pb).map(|(x, y)| 0.5 * x + 0.5 * y[0]).collect();
    let b2: Vec<f64> = ba[1].iter().map(|x| 0.5 * x).collect();
    let head_b = mm(&hb, &transpose(&p2));

    let mut worst: f64 = 0.0;
    worst = worst.max(max_diff(&w1, &merged.layers[0].weight));
    worst = worst.max(max_diff(&w2, &merged.layers[1].weight));
    worst = worst.max(vec_diff(&b1, &merged.layers[0].bias));
    worst = worst.max(vec_diff(&b2, &merged.layers[1].bias));
    worst = worst.max(max_diff(&eye(d), &merged.heads[0].weight));
    worst = worst.max(max_diff(&head_b, &merged.heads[1].weight));
    assert_eq!(merged.layers[1].spec.kind, second.kind);
    worst
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let dense2 = hand_case(
        &mut rng,
        [grid(&[&[1.0, 2.0], &[3.0, 4.0]]), grid(&[&[1.0, 0.0], &[2.0, 1.0]])],
        [vec![1.0, 2.0], vec![0.5, 0.5]],
        grid(&[&[5.0, 6.0], &[7.0, 9.0]]),
        vec![3.0, 4.0],
        [vec![1, 0], vec![0, 1]],
        false,
    );
    let dense3 = hand_case(
        &mut rng,
        [
            grid(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]),
            grid(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, -0.5], &[-2.0, 1.0, 1.0]]),
        ],
        [vec![1.0, -1.0, 0.25], vec![0.0, 2.0, -3.0]],
        grid(&[&[0.0, 1.0, 0.0], &[2.0, 0.0, 2.0], &[1.0, 1.0, 1.0]]),
        vec![0.0, 4.0, 8.0],
        [vec![2, 0, 1], vec![1, 2, 0]],
        false,
    );
    let residual2 = hand_case(
        &mut rng,
        [grid(&[&[2.0, -1.0], &[0.5, 3.0]]), grid(&[&[1.0, 4.0], &[-2.0, 0.5]])],
        [vec![0.5, -0.5], vec![1.0, 3.0]],
        grid(&[&[1.0, 1.0], &[0.0, -2.0]]),
        vec![2.0, 1.0],
        [vec![1, 0], vec![1, 0]],
        true,
    );
    let residual3 = hand_case(
        &mut rng,
        [
            grid(&[&[1.0, 0.0, 2.0], &[0.0, 3.0, 1.0], &[4.0, 1.0, 0.0]]),
            grid(&[&[0.25, 0.5, 0.75], &[1.0, -1.0, 0.0], &[2.0, 0.0, -2.0]]),
        ],
        [vec![0.0, 1.0, 2.0], vec![-1.0, 0.0, 1.0]],
        grid(&[&[3.0, 0.0, 1.0], &[1.0, 2.0, 0.0], &[0.0, 1.0, 5.0]]),
        vec![1.0, 1.0, -1.0],
        [vec![2, 0, 1], vec![2, 0, 1]],
        true,
    );
    let worst = dense2.max(dense3).max(residual2).max(residual3);
    Outcome::new(
        worst <= 1e-12,
        format!(
            "identity-extension 2x2 {dense2:.1e}, 3x3 {dense3:.1e}; zero-residual 2x2 {residual2:.1e}, 3x3 {residual3:.1e}"
        ),
    )
}

// ---------- criterion 6: barrier direction ----------

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let spec = TaskSpec::default();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let data = gen_tasks(&spec, 600 + seed).unwrap();
        let t = &data.tasks[0];
        let arch = mlp_arch(spec.input_dim, 32, 3, false);
        let train = |s: u64| {
            let cfg = TrainConfig {
                seed: s,
                ..TrainConfig::default()
            };
            train_mlp(&arch, 0, &t.task.labels, &t.train, &cfg).unwrap().model
        };
        let (a, b) = (train(2 * seed + 1), train(2 * seed + 2));
        let batch = calibration_batch(&t.train, 512, seed).unwrap();
        let opts = RecipeOptions::new(MergeStrategy::AlignedAvg, None, ExtensionMode::IdentityDense);
        let recipe = prepare_recipe(&a, &b, &batch, &opts).unwrap();
        let aligned_b = reexpress_in_a_basis(&b, recipe.alignment.as_ref().unwrap()).unwrap();
        let vanilla = loss_barrier(&a, &b, &t.test).unwrap().barrier;
        let aligned = loss_barrier(&a, &aligned_b, &t.test).unwrap().barrier;
        wins += usize::from(aligned <= vanilla);
        rows.push(format!("{seed}:{vanilla:.3}->{aligned:.3}"));
    }
    let took = start.elapsed();
    println!("    criterion 6 per seed (vanilla -> aligned barrier): {}", rows.join(" "));
    Outcome::new(
        wins >= 8 && took < Duration::from_secs(120),
        format!("aligned barrier <= vanilla in {wins}/10 pairs, {took:.2?}"),
    )
}

// ---------- criteria 7 and 8: heterogeneous merge and depth diagnostic ----------

struct HeteroSeed {
    acc_a: f64,
    acc_b: f64,
    acc_merged: f64,
    cka_lma: f64,
    cka_sma: f64,
}

fn diagonal_cka(a: &ModelBundle, b: &ModelBundle, batch: &CalibrationBatch, obj: Objective) -> f64 {
    let fa = capture_features(a, batch).unwrap();
    let sim = layer_similarity_matrix(&fa, &capture_features(b, batch).unwrap()).unwrap();
    let plan = depth::align(&sim, obj).unwrap();
    let ext = extend_model(b, &plan.extension_plan(ExtensionMode::IdentityDense).unwrap()).unwrap();
    let fe = capture_features(&ext, batch).unwrap();
    let total: f64 = fa
        .features
        .iter()
        .zip(&fe.features)
        .map(|(x, y)| linear_cka(x, y).unwrap())
        .sum();
    total / fa.len() as f64
}

fn hetero_seed(seed: u64) -> HeteroSeed {
    let spec = TaskSpec::default();
    let data = gen_tasks(&spec, 700 + seed).unwrap();
    let (ta, tb) = (&data.tasks[0], &data.tasks[1]);
    let cfg = |s: u64| TrainConfig {
        seed: s,
        ..TrainConfig::default()
    };
    let deep = train_mlp(&mlp_arch(spec.input_dim, 64, 6, false), ta.task.task, &ta.task.labels, &ta.train, &cfg(3 * seed + 1))
        .unwrap()
        .model;
    let shallow = train_mlp(&mlp_arch(spec.input_dim, 32, 3, false), tb.task.task, &tb.task.labels, &tb.train, &cfg(3 * seed + 2))
        .unwrap()
        .model;
    let batch = calibration_batch(&data.joint_train, 512, seed).unwrap();
    let mut opts = RecipeOptions::new(MergeStrategy::Zip, Some(Objective::Lma), ExtensionMode::IdentityDense);
    opts.align = AlignOptions::zip(Some(64));
    let recipe = prepare_recipe(&deep, &shallow, &batch, &opts).unwrap();
    let merged = merge_models(&deep, &shallow, &recipe).unwrap();
    let tasks = data.partition();
    let acc = |m: &ModelBundle| {
        evaluate(m, &data.joint_test, &tasks, HeadPolicy::MissAsWrong)
            .unwrap()
            .joint_acc
    };
    HeteroSeed {
        acc_a: acc(&deep),
        acc_b: acc(&shallow),
        acc_merged: acc(&merged),
        cka_lma: diagonal_cka(&deep, &shallow, &batch, Objective::Lma),
        cka_sma: diagonal_cka(&deep, &shallow, &batch, Objective::Sma),
    }
}

fn criteria_7_and_8() -> (Outcome, Outcome) {
    let start = Instant::now();
    let seeds: Vec<HeteroSeed> = (0..10).map(hetero_seed).collect();
    let took = start.elapsed();
    let mut wins7 = 0;
    let (mut wins8, mut strict8) = (0, 0);
    for (i, s) in seeds.iter().enumerate() {
        println!(
            "    seed {i}: joint acc A {:.3} B {:.3} merged {:.3} | diagonal CKA LMA {:.4} SMA {:.4}",
            s.acc_a, s.acc_b, s.acc_merged, s.cka_lma, s.cka_sma
        );
        wins7 += usize::from(s.acc_merged > s.acc_a && s.acc_merged > s.acc_b);
        wins8 += usize::from(s.cka_lma >= s.cka_sma);
        strict8 += usize::from(s.cka_lma > s.cka_sma);
    }
    let mean = |f: fn(&HeteroSeed) -> f64| seeds.iter().map(f).sum::<f64>() / seeds.len() as f64;
    (
        Outcome::new(
            wins7 >= 7 && took < Duration::from_secs(300),
            format!(
                "merged beats both single models in {wins7}/10 seeds (mean joint acc A {:.3}, B {:.3}, merged {:.3}), {took:.2?}",
                mean(|s| s.acc_a),
                mean(|s| s.acc_b),
                mean(|s| s.acc_merged)
            ),
        ),
        Outcome::new(
            wins8 >= 6,
            format!(
                "LMA >= SMA in {wins8}/10 seeds ({strict8} strictly greater), mean diagonal CKA LMA {:.4} vs SMA {:.4}",
                mean(|s| s.cka_lma),
                mean(|s| s.cka_sma)
            ),
        ),
    )
}

// ---------- criterion 9: loss-barrier definition ----------

fn scalar_loss(a: &ModelBundle, b: &ModelBundle, lambda: f64, data: &Dataset) -> f64 {
    let mix = |x: f64, y: f64| lambda * x + (1.0 - lambda) * y;
    let mut total = 0.0;
    for s in 0..data.len() {
        let mut h: Vec<f64> = data.x.row(s).to_vec();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let mut out = Vec::with_capacity(la.spec.out_dim);
            for o in 0..la.spec.out_dim {
                let mut z = mix(la.bias[o], lb.bias[o]);
                for (i, hv) in h.iter().enumerate() {
                    z += mix(la.weight.get(o, i), lb.weight.get(o, i)) * hv;
                }
                if la.spec.kind == LayerKind::ResidualDense {
                    z += h[o];
                }
                out.push(if la.spec.activation == Activation::Relu { z.max(0.0) } else { z });
            }
            h = out;
        }
        let (ha, hb) = (&a.heads[0], &b.heads[0]);
        let logits: Vec<f64> = (0..ha.labels.len())
            .map(|c| {
                mix(ha.bias[c], hb.bias[c])
                    + h.iter().enumerate().map(|(i, v)| mix(ha.weight.get(c, i), hb.weight.get(c, i)) * v).sum::<f64>()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let y = ha.labels.iter().position(|&l| l == data.y[s]).unwrap();
        total += lse - logits[y];
    }
    total / data.len() as f64
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC9);
    let specs = [
        LayerSpec::dense(4, 6, Activation::Relu),
        LayerSpec::residual(6, Activation::Relu),
        LayerSpec::dense(6, 5, Activation::Relu),
    ];
    let a = random_bundle(&mut rng, &specs, 0, 3);
    let b = random_bundle(&mut rng, &specs, 0, 3);
    let x = random_inputs(&mut rng, 120, 4);
    let y = (0..120).map(|i| (i % 3) as u32).collect();
    let data = Dataset::new(x, y).unwrap();

    let self_barrier = loss_barrier(&a, &a, &data).unwrap().barrier.abs();
    let report = loss_barrier(&a, &b, &data).unwrap();
    let grid_exact = report.lambdas.len() == 21
        && report.lambdas.iter().enumerate().all(|(i, &l)| l == i as f64 / 20.0)
        && barrier_grid() == report.lambdas;

    let losses: Vec<f64> = (0..21).map(|i| scalar_loss(&a, &b, i as f64 / 20.0, &data)).collect();
    let (la, lb) = (losses[20], losses[0]);
    let expected = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 0.5 * (la + lb);
    let loss_gap = losses
        .iter()
        .zip(&report.losses)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
        .max((joint_loss(&a, &data).unwrap() - la).abs());
    let gap = (report.barrier - expected).abs();
    Outcome::new(
        self_barrier <= 1e-12 && grid_exact && gap <= 1e-10 && loss_gap <= 1e-10,
        format!(
            "barrier(a, a) {self_barrier:.1e}, 21-point grid exact: {grid_exact}, barrier {:.6} vs scalar {expected:.6} (gap {gap:.1e}, worst loss gap {loss_gap:.1e})",
            report.barrier
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let (c7, c8) = criteria_7_and_8();
    let results = [
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, c7),
        (8, c8),
        (9, criterion_9()),
    ];
    let mut failed = 0;
    for (id, o) in &results {
        println!("{} criterion {id}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/9 passed in {:.2?}", 9 - failed, start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
