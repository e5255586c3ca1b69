//! Forward-mode JVPs and reverse-mode gradients against central differences,
//! every parameter individually, on random architectures.

use std::time::Instant;

use hybridflow::net::{self, init_params, Activation, InputTangent, NetworkArch, NetworkParams};
use hybridflow::numkit::{gauss, RealArray, RngState};

struct Case {
    p: NetworkParams,
    z: RealArray,
    r: Vec<f64>,
    t: Vec<f64>,
    c: RealArray,
}

fn case(rng: &mut RngState) -> Case {
    let d = 1 + rng.below(3);
    let k = 1 + rng.below(3);
    let depth = 1 + rng.below(3);
    let hidden: Vec<usize> = (0..depth).map(|_| 2 + rng.below(7)).collect();
    let mut arch = NetworkArch::mlp(d, k, hidden);
    arch.activation = [Activation::Silu, Activation::Softplus, Activation::Tanh][rng.below(3)];
    arch.time_embed_dim = 2 * rng.below(3);
    let p = init_params(&arch, rng).unwrap();
    let n = 1 + rng.below(4);
    let t: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
    let r: Vec<f64> = t.iter().map(|t| t * rng.uniform()).collect();
    Case {
        z: gauss(rng, n, d),
        c: gauss(rng, n, k),
        p,
        r,
        t,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `max |a - b| / max(|a|, |b|)` with a floor on the scale.
fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    max_abs(&diff) / max_abs(a).max(max_abs(b)).max(1e-6)
}

#[test]
fn jvp_matches_central_differences() {
    let start = Instant::now();
    let mut rng = RngState::new(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let Case { p, z, r, t, c } = case(&mut rng);
        let tan = InputTangent {
            dz: gauss(&mut rng, z.rows(), z.cols()),
            dr: 0.1 * rng.normal(),
            dt: 0.1 * rng.normal(),
        };
        let (u, du) = net::forward_jvp(&p, &z, &r, &t, &c, &tan).unwrap();
        assert_eq!(u, net::evaluate(&p, &z, &r, &t, &c).unwrap());
        let at = |s: f64| {
            let zs: Vec<f64> = z.as_slice().iter().zip(tan.dz.as_slice()).map(|(a, b)| a + s * b).collect();
            let rs: Vec<f64> = r.iter().map(|a| a + s * tan.dr).collect();
            let ts: Vec<f64> = t.iter().map(|a| a + s * tan.dt).collect();
            net::evaluate(&p, &RealArray::new(z.rows(), z.cols(), zs).unwrap(), &rs, &ts, &c).unwrap()
        };
        let (hi, lo) = (at(h), at(-h));
        let fd: Vec<f64> = hi.as_slice().iter().zip(lo.as_slice()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        worst = worst.max(rel(du.as_slice(), &fd));
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let start = Instant::now();
    let mut rng = RngState::new(4048);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let Case { p, z, r, t, c } = case(&mut rng);
        let target = gauss(&mut rng, z.rows(), z.cols());
        let m = z.as_slice().len() as f64;
        let loss = |q: &NetworkParams| -> f64 {
            let u = net::evaluate(q, &z, &r, &t, &c).unwrap();
            u.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m
        };
        let (u, trace) = net::forward(&p, &z, &r, &t, &c).unwrap();
        let cot: Vec<f64> = u.as_slice().iter().zip(target.as_slice()).map(|(a, b)| 2.0 * (a - b) / m).collect();
        let cot = RealArray::new(z.rows(), z.cols(), cot).unwrap();
        let analytic = net::backward(&p, &trace, &cot).unwrap().flat();
        let base = p.flat();
        let mut q = p.clone();
        let mut fd = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut moved = base.clone();
            moved[i] = base[i] + h;
            q.set_flat(&moved).unwrap();
            let up = loss(&q);
            moved[i] = base[i] - h;
            q.set_flat(&moved).unwrap();
            fd.push((up - loss(&q)) / (2.0 * h));
        }
        worst = worst.max(rel(&analytic, &fd));
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}
