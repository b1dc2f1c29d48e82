#![allow(dead_code)]

use atlasseg::deformation::VelocityField;
use atlasseg::{GaussianParams, GridShape, ProbAtlas, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid(dims: &[usize]) -> GridShape {
    GridShape::new(dims).unwrap()
}

/// Random strictly positive atlas with labels grouped by `groups`.
pub fn random_atlas(r: &mut ChaCha8Rng, shape: &GridShape, groups: &[usize]) -> ProbAtlas {
    let n = shape.num_voxels();
    let l = groups.len();
    let mut probs = vec![0.0f32; l * n];
    for j in 0..n {
        let w: Vec<f64> = (0..l).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        for k in 0..l {
            probs[k * n + j] = (w[k] / s) as f32;
        }
    }
    // renormalize in f32 so each column sums to 1 within rounding
    for j in 0..n {
        let s: f32 = (0..l).map(|k| probs[k * n + j]).sum();
        for k in 0..l {
            probs[k * n + j] /= s;
        }
    }
    ProbAtlas::new(shape.clone(), l, probs, groups.to_vec()).unwrap()
}

pub fn random_image(r: &mut ChaCha8Rng, shape: &GridShape, lo: f32, hi: f32) -> Volume {
    let data = (0..shape.num_voxels()).map(|_| r.gen_range(lo..hi)).collect();
    Volume::new(shape.clone(), data).unwrap()
}

pub fn random_velocity(r: &mut ChaCha8Rng, shape: &GridShape, stride: usize, amp: f32) -> VelocityField {
    let n = shape.ndim() * shape.num_voxels();
    VelocityField::new(shape.clone(), stride, (0..n).map(|_| r.gen_range(-amp..amp)).collect()).unwrap()
}

pub fn random_params(r: &mut ChaCha8Rng, groups: &[usize]) -> GaussianParams {
    let c = groups.iter().max().unwrap() + 1;
    GaussianParams::new(
        (0..c).map(|_| r.gen_range(0.0..10.0)).collect(),
        (0..c).map(|_| r.gen_range(0.5..4.0)).collect(),
        groups.to_vec(),
    )
    .unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// `exp(M)` of a small square matrix by its Taylor series.
pub fn expm(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = m.len();
    let mut out: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect();
    let mut term = out.clone();
    for k in 1..40 {
        let next: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|l| term[i][l] * m[l][j]).sum::<f64>() / k as f64).collect())
            .collect();
        term = next;
        for i in 0..d {
            for j in 0..d {
                out[i][j] += term[i][j];
            }
        }
    }
    out
}

/// Voxels at least `margin` samples away from every face.
pub fn interior(shape: &GridShape, margin: usize) -> Vec<usize> {
    (0..shape.num_voxels())
        .filter(|&j| {
            shape
                .coords(j)
                .iter()
                .zip(shape.dims())
                .all(|(&c, &n)| c >= margin && c + margin < n)
        })
        .collect()
}

/// Largest interior deviation of `exp(c)` from the translation by `c`.
pub fn translation_error(shape: &GridShape, c: &[f32], steps: usize) -> f64 {
    let n = shape.num_voxels();
    let comps = c.iter().flat_map(|&ck| std::iter::repeat_n(ck, n)).collect();
    let v = VelocityField::new(shape.clone(), 1, comps).unwrap();
    let phi = atlasseg::deformation::exp_ss(&v, steps).unwrap();
    let margin = c.iter().fold(0.0f32, |m, x| m.max(x.abs())).ceil() as usize + 1;
    let u = phi.displacement();
    interior(shape, margin)
        .into_iter()
        .flat_map(|j| (0..c.len()).map(move |k| (u[k * n + j] as f64 - c[k] as f64).abs()))
        .fold(0.0, f64::max)
}

/// Largest interior deviation of `exp(v)` for `v(x) = A (x - x0)` from the
/// exact flow `x0 + expm(A) (x - x0)`; `x0` is the grid center.
pub fn linear_flow_error(shape: &GridShape, a: &[Vec<f64>], steps: usize, margin: usize) -> f64 {
    let n = shape.num_voxels();
    let d = shape.ndim();
    let x0: Vec<f64> = shape.dims().iter().map(|&m| (m as f64 - 1.0) / 2.0).collect();
    let mut comps = vec![0.0f32; d * n];
    for j in 0..n {
        let x = shape.coords(j);
        for k in 0..d {
            comps[k * n + j] = (0..d).map(|l| a[k][l] * (x[l] as f64 - x0[l])).sum::<f64>() as f32;
        }
    }
    let v = VelocityField::new(shape.clone(), 1, comps).unwrap();
    let phi = atlasseg::deformation::exp_ss(&v, steps).unwrap();
    let e = expm(a);
    let u = phi.displacement();
    let mut worst = 0.0f64;
    for j in interior(shape, margin) {
        let x = shape.coords(j);
        for k in 0..d {
            let target = x0[k] + (0..d).map(|l| e[k][l] * (x[l] as f64 - x0[l])).sum::<f64>();
            let got = x[k] as f64 + u[k * n + j] as f64;
            worst = worst.max((got - target).abs());
        }
    }
    worst
}

/// Largest interior displacement of `exp(v) o exp(-v)`, in voxels.
pub fn inverse_consistency(v: &VelocityField, steps: usize, margin: usize) -> f64 {
    use atlasseg::deformation::{compose, exp_ss};
    let fwd = exp_ss(v, steps).unwrap();
    let bwd = exp_ss(&v.negated(), steps).unwrap();
    let id = compose(&fwd, &bwd).unwrap();
    let shape = v.shape();
    let n = shape.num_voxels();
    let u = id.displacement();
    interior(shape, margin)
        .into_iter()
        .map(|j| {
            (0..shape.ndim())
                .map(|k| (u[k * n + j] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Largest deviation of a label column sum from one.
pub fn atlas_norm_error(a: &ProbAtlas) -> f64 {
    let n = a.shape().num_voxels();
    (0..n)
        .map(|j| {
            let s: f64 = (0..a.num_labels()).map(|l| a.prob(l, j) as f64).sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// `-sum_j log sum_c pi_c(j) N(I_j; mu_c, var_c)` written out directly,
/// with `pi` planar `[C][N]`.
pub fn naive_data_term(img: &[f32], pi: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    let n = img.len();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    (0..n)
        .map(|j| {
            let x = img[j] as f64;
            let p: f64 = (0..mu.len())
                .map(|c| pi[c * n + j] * (-0.5 * (ln2pi + var[c].ln()) - (x - mu[c]).powi(2) / (2.0 * var[c])).exp())
                .sum();
            -p.ln()
        })
        .sum()
}

/// Minimum of the two-class data term over `(mu_0, mu_1, log var_0, log
/// var_1)` by a 7^4 grid that is recentred on its best point and halved,
/// until the cell is below `1e-10`. Returns the value and its parameters.
pub fn grid_search_two_class(img: &Volume, pi: &[f64], var_floor: f64) -> (f64, [f64; 4]) {
    let (lo, hi) = img.range();
    let (lo, hi) = (lo as f64, hi as f64);
    let range = (hi - lo).max(1e-12);
    let mut center = [0.5 * (lo + hi), 0.5 * (lo + hi), (range * range / 16.0).ln(), (range * range / 16.0).ln()];
    let mut half = [0.5 * range, 0.5 * range, 8.0, 8.0];
    let eval = |p: &[f64; 4]| {
        let var = [p[2].exp().max(var_floor), p[3].exp().max(var_floor)];
        naive_data_term(img.data(), pi, &p[..2], &var)
    };
    let mut best = (eval(&center), center);
    const K: i32 = 3;
    while half.iter().any(|&h| h > 1e-10) {
        for a in -K..=K {
            for b in -K..=K {
                for c in -K..=K {
                    for d in -K..=K {
                        let p = [
                            center[0] + half[0] * a as f64 / K as f64,
                            center[1] + half[1] * b as f64 / K as f64,
                            center[2] + half[2] * c as f64 / K as f64,
                            center[3] + half[3] * d as f64 / K as f64,
                        ];
                        let f = eval(&p);
                        if f < best.0 {
                            best = (f, p);
                        }
                    }
                }
            }
        }
        center = best.1;
        for h in &mut half {
            *h *= 0.5;
        }
    }
    best
}

/// A two-class 16x16 synthetic scan with its (undeformed) atlas.
pub fn em_instance(seed: u64) -> (Volume, ProbAtlas) {
    use atlasseg::synth::{synth_atlas, synth_scan, SynthConfig};
    let mut r = rng(seed);
    let m0 = r.gen_range(0.0..20.0);
    let cfg = SynthConfig {
        seed,
        dims: vec![16, 16],
        num_labels: 2,
        label_groups: vec![0, 1],
        num_scans: 1,
        means: vec![m0, m0 + r.gen_range(3.0..20.0)],
        stds: vec![r.gen_range(1.0..3.0), r.gen_range(1.0..3.0)],
        ..SynthConfig::default()
    };
    let atlas = synth_atlas(&cfg).unwrap();
    let scan = synth_scan(&cfg, &atlas, 0).unwrap();
    (scan.image, atlas)
}

/// Central differences at `h` that survive interpolation kinks.
///
/// The loss is only piecewise smooth (multilinear resampling, leaky ReLU,
/// max pooling), so a `±h` stencil can straddle a kink and measure a
/// secant instead of a derivative. A component is flagged when its central
/// differences at `h` and `h / 10` disagree — a property of `f` alone, not
/// of any analytic gradient — and is then re-measured with steps shrunk by
/// 10 until two consecutive steps agree. Returns the estimates and the
/// number of flagged components.
pub fn central_diff_kink_aware(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, usize) {
    let mut p = x.to_vec();
    let mut cd = |i: usize, h: f64, p: &mut Vec<f64>| {
        p[i] = x[i] + h;
        let up = f(p);
        p[i] = x[i] - h;
        let down = f(p);
        p[i] = x[i];
        (up - down) / (2.0 * h)
    };
    let agree = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (a.abs().max(b.abs()) + 1.0);
    let mut flagged = 0;
    let out = (0..x.len())
        .map(|i| {
            let coarse = cd(i, h, &mut p);
            let mut fine = cd(i, h / 10.0, &mut p);
            if agree(coarse, fine) {
                return coarse;
            }
            flagged += 1;
            let mut step = h / 10.0;
            while step > 1e-8 {
                step /= 10.0;
                let finer = cd(i, step, &mut p);
                if agree(fine, finer) {
                    return finer;
                }
                fine = finer;
            }
            fine
        })
        .collect();
    (out, flagged)
}
