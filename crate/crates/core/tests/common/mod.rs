//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shuffleunet::model::{ModelConfig, ShuffleUNet};
use shuffleunet::nn::{ops, Eval, Network, ParamKind, Tape};
use shuffleunet::tensor::{Dims, Tensor};

pub fn random_volume(dims: [usize; 3], seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(dims, |_| rng.gen_range(0.0..1.0))
}

fn gauss_1d(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..len).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Weighted two-pass window statistics `(μx, μy, σx², σy², σxy)`.
fn window_stats(a: &Array3<f64>, b: &Array3<f64>, at: [usize; 3], w: &[Vec<f64>; 3]) -> [f64; 5] {
    let mut mx = 0.0;
    let mut my = 0.0;
    for i in 0..w[0].len() {
        for j in 0..w[1].len() {
            for k in 0..w[2].len() {
                let wt = w[0][i] * w[1][j] * w[2][k];
                let p = [at[0] + i, at[1] + j, at[2] + k];
                mx += wt * a[p];
                my += wt * b[p];
            }
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in 0..w[0].len() {
        for j in 0..w[1].len() {
            for k in 0..w[2].len() {
                let wt = w[0][i] * w[1][j] * w[2][k];
                let p = [at[0] + i, at[1] + j, at[2] + k];
                let (dx, dy) = (a[p] - mx, b[p] - my);
                vx += wt * dx * dx;
                vy += wt * dy * dy;
                cxy += wt * dx * dy;
            }
        }
    }
    [mx, my, vx, vy, cxy]
}

fn sliding_mean(a: &Array3<f64>, b: &Array3<f64>, w: [Vec<f64>; 3], local: impl Fn([f64; 5]) -> f64) -> f64 {
    let s = a.shape();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..=s[0] - w[0].len() {
        for j in 0..=s[1] - w[1].len() {
            for k in 0..=s[2] - w[2].len() {
                sum += local(window_stats(a, b, [i, j, k], &w));
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Brute-force SSIM: Gaussian σ = 1.5, 11-voxel window, K1 = 0.01, K2 = 0.03,
/// data range max − min over both inputs.
pub fn brute_ssim(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let lo = a.iter().chain(b.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let l = if hi > lo { hi - lo } else { 1.0 };
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let w = [0, 1, 2].map(|d| gauss_1d(a.shape()[d].min(11), 1.5));
    sliding_mean(a, b, w, |[mx, my, vx, vy, cxy]| {
        ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    })
}

/// Brute-force UQI over uniform 8-voxel cubes, `4σxy μx μy / ((σx² + σy²)(μx² + μy²))`.
pub fn brute_uqi(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let w = [0, 1, 2].map(|d| {
        let l = a.shape()[d].min(8);
        vec![1.0 / l as f64; l]
    });
    sliding_mean(a, b, w, |[mx, my, vx, vy, cxy]| {
        4.0 * cxy * mx * my / ((vx + vy) * (mx * mx + my * my))
    })
}

pub fn brute_rmse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

/// Γ(n/2) for a positive integer `n`.
fn gamma_half(n: u32) -> f64 {
    let mut g = if n % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut k = if n % 2 == 0 { 2 } else { 1 };
    while k < n {
        g *= k as f64 / 2.0;
        k += 2;
    }
    g
}

/// Two-tailed Student-t p-value by Simpson integration of the density on [0, |t|];
/// `df` must be a positive integer.
pub fn simpson_p(t: f64, df: u32) -> f64 {
    let nu = df as f64;
    let c = gamma_half(df + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(df));
    let f = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Linear interpolation basis on `n` samples, extended linearly past both ends.
fn extended_hat(n: usize, i: usize, x: f64) -> f64 {
    if n == 1 {
        return 1.0;
    }
    if x < 0.0 {
        return match i {
            0 => 1.0 - x,
            1 => x,
            _ => 0.0,
        };
    }
    let last = (n - 1) as f64;
    if x > last {
        let u = x - (last - 1.0);
        return if i == n - 2 {
            1.0 - u
        } else if i == n - 1 {
            u
        } else {
            0.0
        };
    }
    (1.0 - (x - i as f64).abs()).max(0.0)
}

/// Per-voxel weight-sum trilinear oracle with align-corners-false coordinates.
pub fn brute_trilinear(src: &Array3<f64>, target: [usize; 3]) -> Array3<f64> {
    let s = src.shape().to_vec();
    Array3::from_shape_fn(target, |(a, b, c)| {
        let t = [a, b, c];
        let x: Vec<f64> = (0..3)
            .map(|d| (t[d] as f64 + 0.5) * s[d] as f64 / target[d] as f64 - 0.5)
            .collect();
        let mut acc = 0.0;
        for ((i, j, k), v) in src.indexed_iter() {
            acc += extended_hat(s[0], i, x[0]) * extended_hat(s[1], j, x[1]) * extended_hat(s[2], k, x[2]) * v;
        }
        acc
    })
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub tensors: usize,
    pub directional_checks: usize,
    pub slice_checks: usize,
    pub element_checks: usize,
    pub kink_skips: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, what: String, fd: f64, an: f64) {
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = format!("{what}: fd {fd:e} vs analytic {an:e}");
        }
    }
}

/// How many weight entries per tensor get an individual finite difference.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    Sampled(usize),
}

struct Probe {
    model: ShuffleUNet<f64>,
    x: Tensor<f64>,
    target: Tensor<f64>,
    signs: Vec<bool>,
}

impl Probe {
    fn loss(&self) -> (f64, Vec<bool>) {
        let mut tape = Tape::new(&self.model.params, true);
        let xv = tape.input(self.x.clone());
        let out = self.model.arch.forward_with(&mut tape, &xv).expect("forward");
        let (l, _) = ops::l1_with_grad(tape.value(out), &self.target).expect("loss");
        (l, tape.activation_signs())
    }

    /// Central difference along `dir` (a list of (tensor, element, weight)); `None`
    /// when every step size crosses a rectifier kink.
    fn directional(&mut self, dir: &[(usize, usize, f64)]) -> Option<f64> {
        let mut h = 1e-4;
        for _ in 0..4 {
            let eval = |sign: f64, p: &mut Probe| {
                for &(t, e, w) in dir {
                    p.model.params.values_mut()[t].data_mut()[e] += sign * h * w;
                }
                let r = p.loss();
                for &(t, e, w) in dir {
                    p.model.params.values_mut()[t].data_mut()[e] -= sign * h * w;
                }
                r
            };
            let (lp, sp) = eval(1.0, self);
            let (lm, sm) = eval(-1.0, self);
            if sp == self.signs && sm == self.signs {
                return Some((lp - lm) / (2.0 * h));
            }
            h /= 10.0;
        }
        None
    }
}

/// Checks analytic gradients of the L1 loss against central differences in f64.
///
/// Every tensor gets a random-direction check and every leading-index slice of a
/// weight tensor gets its own, so each parameter is perturbed. Biases are then
/// checked element by element, and weights according to `coverage`. Biases start at small random
/// values and the target sits 0.5 to 1 away from the prediction on every voxel,
/// so the loss is smooth around the evaluation point.
pub fn gradient_check(cfg: ModelConfig, side: usize, coverage: Coverage, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: ShuffleUNet<f64> = ShuffleUNet::new(cfg).expect("model");
    for (spec, v) in model.params.specs().to_vec().iter().zip(model.params.values_mut()) {
        if spec.kind == ParamKind::Bias {
            for b in v.data_mut() {
                *b = rng.gen_range(-0.05..0.05);
            }
        }
    }
    let x = Tensor::from_fn(Dims::new(1, 1, side, side, side), |_| rng.gen_range(-1.0..1.0));
    let pred = model.arch.forward_with(&mut Eval::new(&model.params), &x).expect("forward");
    let target = Tensor::from_fn(pred.dims(), |i| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        pred.get(i) + sign * rng.gen_range(0.5..1.0)
    });

    let grads = {
        let mut tape = Tape::new(&model.params, true);
        let xv = tape.input(x.clone());
        let out = model.arch.forward_with(&mut tape, &xv).expect("forward");
        let (_, g) = ops::l1_with_grad(tape.value(out), &target).expect("loss");
        tape.backward(out, g).expect("backward").params
    };
    let mut probe = Probe {
        model,
        x,
        target,
        signs: Vec::new(),
    };
    probe.signs = probe.loss().1;

    let mut report = GradCheck::default();
    let specs = probe.model.params.specs().to_vec();
    for (t, spec) in specs.iter().enumerate() {
        let g = grads[t].as_ref().unwrap_or_else(|| panic!("{} has no gradient", spec.name));
        report.tensors += 1;
        let n = spec.dims.numel();

        let dir: Vec<(usize, usize, f64)> = (0..n).map(|e| (t, e, rng.gen_range(-1.0..1.0))).collect();
        let an: f64 = dir.iter().map(|&(_, e, w)| w * g.data()[e]).sum();
        match probe.directional(&dir) {
            Some(fd) => {
                report.directional_checks += 1;
                report.record(format!("{} (direction)", spec.name), fd, an);
            }
            None => report.kink_skips += 1,
        }

        if matches!(spec.kind, ParamKind::Weight { .. }) {
            let lead = spec.dims.0[0];
            let chunk = n / lead;
            for s in 0..lead {
                let dir: Vec<(usize, usize, f64)> =
                    (s * chunk..(s + 1) * chunk).map(|e| (t, e, rng.gen_range(-1.0..1.0))).collect();
                let an: f64 = dir.iter().map(|&(_, e, w)| w * g.data()[e]).sum();
                match probe.directional(&dir) {
                    Some(fd) => {
                        report.slice_checks += 1;
                        report.record(format!("{}[{s}, ..] (direction)", spec.name), fd, an);
                    }
                    None => report.kink_skips += 1,
                }
            }
        }

        let elements: Vec<usize> = match (spec.kind, coverage) {
            (ParamKind::Bias, _) | (_, Coverage::All) => (0..n).collect(),
            (_, Coverage::Sampled(k)) if k >= n => (0..n).collect(),
            (_, Coverage::Sampled(k)) => rand::seq::index::sample(&mut rng, n, k).into_vec(),
        };
        for e in elements {
            match probe.directional(&[(t, e, 1.0)]) {
                Some(fd) => {
                    report.element_checks += 1;
                    report.record(format!("{}[{e}]", spec.name), fd, g.data()[e]);
                }
                None => report.kink_skips += 1,
            }
        }
    }
    report
}

/// Tiny gradient-check configuration: two levels, eight base filters.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        base_filters: 8,
        init_seed: 11,
        ..ModelConfig::default()
    }
}

/// Round-trips `cases` random tensors through unshuffle/shuffle for r ∈ {2, 3};
/// returns the first failure.
pub fn shuffle_round_trips(cases: usize, seed: u64) -> Result<(), String> {
    use shuffleunet::shuffle::{pixel_shuffle_3d, pixel_unshuffle_3d, ShuffleSpec};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let r = if rng.gen_bool(0.5) { 2 } else { 3 };
        let dims = Dims::new(
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            r * rng.gen_range(1..=3),
            r * rng.gen_range(1..=3),
            r * rng.gen_range(1..=3),
        );
        let x = Tensor::from_fn(dims, |_| rng.gen_range(-1e3f32..1e3));
        let spec = ShuffleSpec::new(r).map_err(|e| e.to_string())?;
        let down = pixel_unshuffle_3d(&x, spec).map_err(|e| e.to_string())?;
        let back = pixel_shuffle_3d(&down, spec).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back.dims() != dims || bits(&back) != bits(&x) {
            return Err(format!("case {case}: r={r} {dims:?} is not restored bitwise"));
        }
        let (mut a, mut b) = (bits(&x), bits(&down));
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(format!("case {case}: r={r} {dims:?} changes the element multiset"));
        }
    }
    Ok(())
}

/// Traces the default configuration on a `(batch, 1, 96, 96, 48)` input and lists
/// every layer whose dims differ from the documented channel schedule.
pub fn shape_contract_violations(batch: usize) -> Vec<String> {
    use shuffleunet::model::ShuffleUNetArch;
    let arch = ShuffleUNetArch::new(ModelConfig::default()).expect("default config");
    let t = arch.trace(Dims::new(batch, 1, 96, 96, 48)).expect("trace");
    let mut bad = Vec::new();
    let mut expect = |tag: String, want: Dims| {
        let got = t.find(&tag);
        if got != Some(want) {
            bad.push(format!("{tag}: expected {want:?}, got {got:?}"));
        }
    };
    expect("output".into(), Dims::new(batch, 1, 96, 96, 48));
    let f = [64, 128, 256, 512];
    for l in 1..=4 {
        let s = [96 >> (l - 1), 96 >> (l - 1), 48 >> (l - 1)];
        let at = |c| Dims::new(batch, c, s[0], s[1], s[2]);
        let fl = f[l - 1];
        expect(format!("enc{l}.double_conv"), at(fl));
        for i in 1..=4 {
            expect(format!("enc{l}.branch{i}"), at(fl));
        }
        expect(format!("enc{l}.unshuffle"), Dims::new(batch, 8 * fl, s[0] / 2, s[1] / 2, s[2] / 2));
        let below = if l == 4 { 1024 } else { f[l] };
        expect(format!("dec{l}.shuffle"), at(below / 8));
        for i in 1..=4 {
            expect(format!("dec{l}.branch{i}"), at(fl));
        }
        expect(format!("dec{l}.concat"), at(5 * fl));
        expect(format!("dec{l}.double_conv"), at(fl));
    }
    expect("latent".into(), Dims::new(batch, 1024, 6, 6, 3));
    bad
}

/// Fits a levels=2, base_filters=8 network to one 16³ phantom patch with Adam.
/// Returns the L1 of every step.
pub fn overfit_losses(steps: usize, learning_rate: f64) -> Vec<f64> {
    use shuffleunet::data::{crop, phantom::phantom_volume};
    use shuffleunet::training::{Trainer, TrainingPair};
    let hr = phantom_volume([32, 32, 32], [1.0; 3], 3).expect("phantom");
    let pair = TrainingPair::from_hr("phantom", 0, &hr, 2).expect("pair");
    let x = crop(pair.input.view(), [8, 8, 8], [16; 3]).expect("crop");
    let y = crop(pair.target.view(), [8, 8, 8], [16; 3]).expect("crop");
    let model: ShuffleUNet = ShuffleUNet::new(gradcheck_config()).expect("model");
    let mut trainer = Trainer::new(model, learning_rate);
    (0..steps).map(|_| trainer.step(&x, &y).expect("step")).collect()
}

/// Library metrics vs the brute-force oracles on `pairs` random 16³ pairs.
/// Returns the largest absolute deviation of (SSIM, UQI, RMSE).
pub fn metric_oracle_deviation(pairs: usize, seed: u64) -> [f64; 3] {
    use shuffleunet::metrics::{rmse, ssim, uqi, SsimParams, UqiParams};
    let mut worst = [0.0f64; 3];
    for i in 0..pairs as u64 {
        let a = random_volume([16; 3], seed + 2 * i);
        let noise = random_volume([16; 3], seed + 2 * i + 1);
        // Alternate between correlated and unrelated pairs.
        let b = if i % 2 == 0 { &a * 0.8 + &noise * 0.3 } else { noise };
        let got = [
            ssim(a.view(), b.view(), &SsimParams::default(), None).unwrap(),
            uqi(a.view(), b.view(), &UqiParams::default(), None).unwrap(),
            rmse(a.view(), b.view(), None).unwrap(),
        ];
        let want = [brute_ssim(&a, &b), brute_uqi(&a, &b), brute_rmse(&a, &b)];
        for k in 0..3 {
            worst[k] = worst[k].max((got[k] - want[k]).abs());
        }
    }
    worst
}

/// 1 b0 plus `n` unit directions at b = 1000.
pub fn dti_table(n: usize) -> (Vec<f64>, Vec<[f64; 3]>) {
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0; 3]];
    bvals.extend(std::iter::repeat_n(1000.0, n));
    bvecs.extend(shuffleunet::data::phantom::hemisphere_directions(n));
    (bvals, bvecs)
}

/// Noiseless signals `S0 · exp(−b gᵀ D g)`.
pub fn dti_signals(s0: f64, d: &nalgebra::Matrix3<f64>, bvals: &[f64], bvecs: &[[f64; 3]]) -> Vec<f64> {
    bvals
        .iter()
        .zip(bvecs)
        .map(|(b, g)| {
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += g[i] * d[(i, j)] * g[j];
                }
            }
            s0 * (-b * q).exp()
        })
        .collect()
}

pub fn random_spd(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let r = random_rotation(rng);
    let l = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
        rng.gen_range(0.1e-3..3e-3),
        rng.gen_range(0.1e-3..3e-3),
        rng.gen_range(0.1e-3..3e-3),
    ));
    r * l * r.transpose()
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let axis = nalgebra::Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = nalgebra::Unit::new_normalize(axis + nalgebra::Vector3::new(0.0, 0.0, 1e-3));
    *nalgebra::Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::TAU)).matrix()
}

/// FA straight from its definition.
pub fn fa_formula(l: [f64; 3]) -> f64 {
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let num = (l[0] - md).powi(2) + (l[1] - md).powi(2) + (l[2] - md).powi(2);
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if den == 0.0 {
        0.0
    } else {
        (1.5_f64).sqrt() * num.sqrt() / den.sqrt()
    }
}

/// Largest deviations found by the DTI round-trip checks.
#[derive(Debug, Default)]
pub struct DtiRoundTrip {
    pub coefficient_error: f64,
    pub eigenvalue_error: f64,
    pub scalar_error: f64,
    pub rotation_error: f64,
    pub invariance_error: f64,
    pub condition_number: f64,
}

/// Fits noiseless signals of isotropic, anisotropic and `random` SPD tensors
/// (16 directions + 1 b0), then refits each under `random` bvec rotations.
pub fn dti_round_trip(random: usize, seed: u64) -> DtiRoundTrip {
    use nalgebra::Matrix3;
    use shuffleunet::dti::{
        axial_diffusivity, components_of, eigenvalues, fractional_anisotropy, mean_diffusivity, GradientTable,
        TensorFitter,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bvals, bvecs) = dti_table(16);
    let fitter = TensorFitter::new(GradientTable::new(bvals.clone(), bvecs.clone()).unwrap()).unwrap();
    let mut out = DtiRoundTrip {
        condition_number: fitter.condition_number,
        ..Default::default()
    };

    let mut cases: Vec<(Matrix3<f64>, Option<[f64; 3]>)> = vec![
        (Matrix3::from_diagonal_element(0.8e-3), Some([0.8e-3; 3])),
        (Matrix3::from_diagonal(&nalgebra::Vector3::new(1.7e-3, 0.3e-3, 0.3e-3)), Some([1.7e-3, 0.3e-3, 0.3e-3])),
    ];
    cases.extend((0..random).map(|_| (random_spd(&mut rng), None)));

    for (d, known) in cases {
        let s0 = rng.gen_range(100.0..1000.0);
        let fit = fitter.fit_signals(&dti_signals(s0, &d, &bvals, &bvecs)).unwrap();
        let truth = [d[(0, 0)], d[(0, 1)], d[(0, 2)], d[(1, 1)], d[(1, 2)], d[(2, 2)]];
        for (a, b) in fit.coefficients.iter().zip(truth) {
            out.coefficient_error = out.coefficient_error.max((a - b).abs());
        }
        let l = eigenvalues(&fit.tensor());
        if let Some(k) = known {
            for (a, b) in l.iter().zip(k) {
                out.eigenvalue_error = out.eigenvalue_error.max((a - b).abs());
            }
            let md = (k[0] + k[1] + k[2]) / 3.0;
            for (a, b) in [
                (axial_diffusivity(l), k[0]),
                (mean_diffusivity(l), md),
                (fractional_anisotropy(l), fa_formula(k)),
            ] {
                out.scalar_error = out.scalar_error.max((a - b).abs());
            }
        }

        for _ in 0..3 {
            let r = random_rotation(&mut rng);
            let rotated: Vec<[f64; 3]> = bvecs
                .iter()
                .map(|g| {
                    let v = r * nalgebra::Vector3::new(g[0], g[1], g[2]);
                    [v.x, v.y, v.z]
                })
                .collect();
            let rd = r * d * r.transpose();
            let rf = TensorFitter::new(GradientTable::new(bvals.clone(), rotated.clone()).unwrap()).unwrap();
            let refit = rf.fit_signals(&dti_signals(s0, &rd, &bvals, &rotated)).unwrap();
            for (a, b) in refit.coefficients.iter().zip(components_of(&rd)) {
                out.rotation_error = out.rotation_error.max((a - b).abs());
            }
            let lr = eigenvalues(&refit.tensor());
            for (a, b) in [
                (axial_diffusivity(lr), axial_diffusivity(l)),
                (mean_diffusivity(lr), mean_diffusivity(l)),
                (fractional_anisotropy(lr), fractional_anisotropy(l)),
            ] {
                out.invariance_error = out.invariance_error.max((a - b).abs());
            }
        }
    }
    out
}

/// Worked example, invariances and significance flag of the pooled t-test;
/// returns the first violated property.
pub fn ttest_properties(seed: u64) -> Result<(), String> {
    use shuffleunet::stats::{ttest_independent, SampleSet, VarianceModel};
    let set = |m: &str, v: Vec<f64>| SampleSet::new(m, "uqi", v).unwrap();
    let a = set("a", vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let b = set("b", vec![2.0, 3.0, 4.0, 5.0, 6.0]);
    let r = ttest_independent(&a, &b, VarianceModel::Pooled);
    if (r.t + 1.0).abs() > 1e-12 || r.df != 8.0 || (r.p - 0.3466).abs() > 1e-3 || r.significant() {
        return Err(format!("worked example gave {r:?}"));
    }
    if (r.p - simpson_p(-1.0, 8)).abs() > 1e-8 {
        return Err(format!("p {} differs from the integrated density {}", r.p, simpson_p(-1.0, 8)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..200 {
        let na = rng.gen_range(2..12);
        let nb = rng.gen_range(2..12);
        let xs: Vec<f64> = (0..na).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ys: Vec<f64> = (0..nb).map(|_| rng.gen_range(0.3..1.3)).collect();
        let base = ttest_independent(&set("x", xs.clone()), &set("y", ys.clone()), VarianceModel::Pooled);
        if !(0.0..=1.0).contains(&base.p) {
            return Err(format!("case {case}: p = {}", base.p));
        }
        let swapped = ttest_independent(&set("y", ys.clone()), &set("x", xs.clone()), VarianceModel::Pooled);
        if (swapped.t + base.t).abs() > 1e-9 * base.t.abs().max(1.0) || (swapped.p - base.p).abs() > 1e-12 {
            return Err(format!("case {case}: swap gave {swapped:?} vs {base:?}"));
        }
        let (c, k) = (rng.gen_range(-5.0..5.0), rng.gen_range(0.1..10.0));
        let shifted = ttest_independent(
            &set("x", xs.iter().map(|v| v + c).collect()),
            &set("y", ys.iter().map(|v| v + c).collect()),
            VarianceModel::Pooled,
        );
        let scaled = ttest_independent(
            &set("x", xs.iter().map(|v| v * k).collect()),
            &set("y", ys.iter().map(|v| v * k).collect()),
            VarianceModel::Pooled,
        );
        for (name, o) in [("shift", &shifted), ("scale", &scaled)] {
            if (o.t - base.t).abs() > 1e-8 * base.t.abs().max(1.0) || (o.p - base.p).abs() > 1e-8 {
                return Err(format!("case {case}: {name} gave {o:?} vs {base:?}"));
            }
        }
        if base.significant() != (base.p < 0.05) {
            return Err(format!("case {case}: significance flag disagrees with p = {}", base.p));
        }
    }
    let far = ttest_independent(
        &set("a", vec![0.90, 0.91, 0.92, 0.93]),
        &set("b", vec![0.80, 0.81, 0.82, 0.83]),
        VarianceModel::Pooled,
    );
    if !far.significant() || far.p >= 0.05 {
        return Err(format!("clearly separated samples are not significant: {far:?}"));
    }
    Ok(())
}

/// Settings of the desk-scale comparison.
#[derive(Clone, Debug)]
pub struct DeskScale {
    pub subjects: usize,
    pub test_subjects: usize,
    pub side: usize,
    pub model: ModelConfig,
    pub train: shuffleunet::training::TrainConfig,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale {
            subjects: 8,
            test_subjects: 2,
            side: 64,
            model: ModelConfig {
                levels: 2,
                base_filters: 8,
                init_seed: 1,
                ..ModelConfig::default()
            },
            train: shuffleunet::training::TrainConfig {
                epochs: 10,
                batch_size: 4,
                learning_rate: 1e-3,
                patches_per_volume: 64,
                patch_size: [16; 3],
                seed: 3,
                deterministic: true,
                ..Default::default()
            },
        }
    }
}

/// Mean (SSIM, RMSE) per method over the held-out subjects.
#[derive(Debug)]
pub struct DeskScaleResult {
    pub shuffleunet: (f64, f64),
    pub trilinear: (f64, f64),
    /// Trilinear sampling with LR sample `j` at HR index `2j`, matching the LR simulation.
    pub trilinear_aligned: (f64, f64),
    pub sinc: (f64, f64),
    pub final_train_l1: f64,
    pub seconds: f64,
}

/// Trains on phantoms `0..subjects - test_subjects` and scores the rest.
pub fn desk_scale(cfg: &DeskScale) -> DeskScaleResult {
    use shuffleunet::baselines::trilinear_upsample;
    use shuffleunet::data::{phantom::phantom_volume, simulate_lowres, sinc_upsample};
    use shuffleunet::metrics::evaluate_pair;
    use shuffleunet::training::{infer, train, InferConfig, TrainingPair};

    let start = std::time::Instant::now();
    let dims = [cfg.side; 3];
    let hr: Vec<_> = (0..cfg.subjects as u64)
        .map(|s| phantom_volume(dims, [1.0; 3], 1000 + s).expect("phantom"))
        .collect();
    let lr: Vec<_> = hr.iter().map(|v| simulate_lowres(v, 2).expect("lowres")).collect();
    let sinc: Vec<_> = lr.iter().map(|v| sinc_upsample(v, dims).expect("sinc")).collect();
    let n_train = cfg.subjects - cfg.test_subjects;
    let pairs: Vec<_> = (0..n_train)
        .map(|i| TrainingPair::from_volumes(&format!("p{i}"), 0, &sinc[i], &hr[i]).expect("pair"))
        .collect();
    let model: ShuffleUNet = ShuffleUNet::new(cfg.model.clone()).expect("model");
    let (model, outcome) = train(model, &pairs, &[], &cfg.train, None, None).expect("train");

    let infer_cfg = InferConfig {
        patch_size: dims,
        overlap: [0; 3],
        batch_size: 1,
    };
    let mut sums = [[0.0f64; 2]; 4];
    for i in n_train..cfg.subjects {
        let candidates = [
            infer(&model, &sinc[i], &infer_cfg).expect("infer").voxels,
            trilinear_upsample(&lr[i], dims).expect("trilinear").voxels,
            aligned_trilinear(&lr[i].voxels.mapv(|v| v as f64), dims).mapv(|v| v as f32),
            sinc[i].voxels.clone(),
        ];
        for (k, c) in candidates.iter().enumerate() {
            let s = evaluate_pair(hr[i].voxels.view(), c.view(), None).expect("metrics");
            sums[k][0] += s.ssim;
            sums[k][1] += s.rmse;
        }
    }
    let mean = |k: usize| (sums[k][0] / cfg.test_subjects as f64, sums[k][1] / cfg.test_subjects as f64);
    DeskScaleResult {
        shuffleunet: mean(0),
        trilinear: mean(1),
        trilinear_aligned: mean(2),
        sinc: mean(3),
        final_train_l1: outcome.epochs.last().map_or(f64::NAN, |e| e.train_l1),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Trilinear interpolation with LR sample `j` placed at HR index `j · target / n`,
/// clamping at the far edge.
pub fn aligned_trilinear(src: &Array3<f64>, target: [usize; 3]) -> Array3<f64> {
    let s = src.shape().to_vec();
    let tap = |axis: usize, t: usize| {
        let x = t as f64 * s[axis] as f64 / target[axis] as f64;
        let i0 = (x.floor() as usize).min(s[axis] - 1);
        let i1 = (i0 + 1).min(s[axis] - 1);
        (i0, i1, x - i0 as f64)
    };
    Array3::from_shape_fn(target, |(a, b, c)| {
        let (a0, a1, wa) = tap(0, a);
        let (b0, b1, wb) = tap(1, b);
        let (c0, c1, wc) = tap(2, c);
        let mut acc = 0.0;
        for (ia, fa) in [(a0, 1.0 - wa), (a1, wa)] {
            for (ib, fb) in [(b0, 1.0 - wb), (b1, wb)] {
                for (ic, fc) in [(c0, 1.0 - wc), (c1, wc)] {
                    acc += fa * fb * fc * src[[ia, ib, ic]];
                }
            }
        }
        acc
    })
}
