//! Acceptance suite: one PASS/FAIL line per criterion on stderr.
//!
//! Downstream protocol shared by the directional criteria (32x32 synthetic
//! retina, 300 images, depth-2 net with 8 base channels, 20 pre-training
//! epochs, seeds 0..5):
//! - classification: linear probe on the frozen representation, full labels;
//! - segmentation: full fine-tuning for 12 epochs at lr 3e-3, two trials.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;
use tower_core::augment::{apply_plan, sample_plan, AugmentConfig, ProxyMode};
use tower_core::config::{apply_entries, read_kv_file};
use tower_core::data::{gen_synthetic_retina, Dataset};
use tower_core::eval::*;
use tower_core::losses::{
    contrastive_on_graph, info_nce, mse_restoration, tower_on_graph, PairBatch,
};
use tower_core::nn::{Graph, ParamId, Tensor, UNet, UNetConfig, Var};
use tower_core::rng::rng_from_seed;
use tower_core::trainer::{pretrain, PretrainArm, PretrainOutput, TrainConfig};
use tower_core::transform::mask::{ray_endpoint, rays_mask_with_offset};
use tower_core::transform::*;
use tower_core::Image;

const SEEDS: u64 = 5;
const SIDE: usize = 32;
const N_IMAGES: usize = 300;
const ARMS: [PretrainArm; 5] = [
    PretrainArm::Random,
    PretrainArm::GenNl,
    PretrainArm::GenM,
    PretrainArm::GenNlM,
    PretrainArm::Tower,
];

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(id: &str, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] {id} {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "{id} failed: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- C1

/// `||fd - analytic|| / max(||fd||, ||analytic||)` over every entry of every
/// parameter, central differences with step `h`. `eval` records the loss
/// with parameter `i` bound as `ParamId(i)`.
fn fd_rel_err<E>(params: &[Tensor<f64>], h: f64, eval: E) -> f64
where
    E: Fn(&[Tensor<f64>]) -> (Graph<f64>, Var),
{
    let (g, loss) = eval(params);
    let grads = g.backward(loss).unwrap();
    let (mut diff, mut nf, mut na) = (0.0, 0.0, 0.0);
    for (pi, p) in params.iter().enumerate() {
        let zero = Tensor::zeros(p.shape());
        let an = grads.get(ParamId(pi)).unwrap_or(&zero);
        for j in 0..p.len() {
            let mut ps = params.to_vec();
            ps[pi].data_mut()[j] += h;
            let (g1, l1) = eval(&ps);
            ps[pi].data_mut()[j] -= 2.0 * h;
            let (g2, l2) = eval(&ps);
            let fd = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * h);
            let a = an.data()[j];
            diff += (fd - a) * (fd - a);
            nf += fd * fd;
            na += a * a;
        }
    }
    let scale = nf.sqrt().max(na.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

fn grad_rel_err<F>(params: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    fd_rel_err(params, h, |ps| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(ParamId(i), p.clone()))
            .collect();
        let loss = f(&mut g, &vars);
        (g, loss)
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Entries bounded away from zero so a step never crosses a ReLU kink.
fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Distinct entries at least 0.01 apart so pooling windows never tie.
fn spaced(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn target_mse(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let t = uniform(&mut rng_from_seed(seed), g.shape(y));
    g.mse(y, t).unwrap()
}

type Case = Box<dyn Fn(&mut tower_core::rng::TowerRng, u64) -> f64>;

fn primitive_cases() -> Vec<(&'static str, Case)> {
    let h = 1e-3;
    vec![
        (
            "conv3x3",
            Box::new(move |r, s| {
                let (n, ci, co, hh, ww) = (
                    r.random_range(1..3),
                    r.random_range(1..4),
                    r.random_range(1..4),
                    r.random_range(2..6),
                    r.random_range(2..6),
                );
                let ps = [
                    uniform(r, &[n, ci, hh, ww]),
                    uniform(r, &[co, ci, 3, 3]),
                    uniform(r, &[co]),
                ];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 1).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "conv1x1",
            Box::new(move |r, s| {
                let (n, ci, co, hh, ww) = (
                    r.random_range(1..3),
                    r.random_range(1..4),
                    r.random_range(1..4),
                    r.random_range(1..6),
                    r.random_range(1..6),
                );
                let ps = [
                    uniform(r, &[n, ci, hh, ww]),
                    uniform(r, &[co, ci, 1, 1]),
                    uniform(r, &[co]),
                ];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 0).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "dense",
            Box::new(move |r, s| {
                let (n, i, o) = (
                    r.random_range(1..5),
                    r.random_range(1..6),
                    r.random_range(1..6),
                );
                let ps = [uniform(r, &[n, i]), uniform(r, &[o, i]), uniform(r, &[o])];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.dense(v[0], v[1], v[2]).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "relu",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [r.random_range(1..4), r.random_range(1..8)];
                    off_zero(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.relu(v[0]);
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "sigmoid",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [r.random_range(1..4), r.random_range(1..8)];
                    uniform(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.sigmoid(v[0]);
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "max_pool2",
            Box::new(move |r, s| {
                let shape = [
                    r.random_range(1..3),
                    r.random_range(1..3),
                    2 * r.random_range(1..4),
                    2 * r.random_range(1..4),
                ];
                let ps = [spaced(r, &shape)];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.max_pool2(v[0]).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "upsample2",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [
                        r.random_range(1..3),
                        r.random_range(1..3),
                        r.random_range(1..4),
                        r.random_range(1..4),
                    ];
                    uniform(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.upsample2(v[0]).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "concat",
            Box::new(move |r, s| {
                let (n, hh, ww) = (
                    r.random_range(1..3),
                    r.random_range(1..4),
                    r.random_range(1..4),
                );
                let ps = [
                    {
                        let sh = [n, r.random_range(1..3), hh, ww];
                        uniform(r, &sh)
                    },
                    {
                        let sh = [n, r.random_range(1..3), hh, ww];
                        uniform(r, &sh)
                    },
                ];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.concat(v[0], v[1]).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "global_avg_pool",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [
                        r.random_range(1..3),
                        r.random_range(1..4),
                        r.random_range(1..5),
                        r.random_range(1..5),
                    ];
                    uniform(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.global_avg_pool(v[0]).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "l2_normalize",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [r.random_range(1..5), r.random_range(2..6)];
                    off_zero(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.l2_normalize(v[0]).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "batch_norm",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [r.random_range(2..6), r.random_range(1..5)];
                    uniform(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| {
                    let y = g.batch_norm(v[0], 1e-5).unwrap();
                    target_mse(g, y, s)
                })
            }),
        ),
        (
            "add_scale_sum",
            Box::new(move |r, _| {
                let shape = [r.random_range(1..4), r.random_range(1..5)];
                let k = r.random_range(-2.0..2.0);
                let ps = [uniform(r, &shape), uniform(r, &shape)];
                grad_rel_err(&ps, h, |g, v| {
                    let a = g.add(v[0], v[1]).unwrap();
                    let b = g.scale(a, k);
                    let c = g.sigmoid(b);
                    g.sum(c)
                })
            }),
        ),
        (
            "info_nce",
            Box::new(move |r, _| {
                let (n, e) = (r.random_range(2..5), r.random_range(2..5));
                let tau = r.random_range(0.1..1.0);
                let symmetric = r.random_bool(0.5);
                let ps = [off_zero(r, &[n, e]), off_zero(r, &[n, e])];
                grad_rel_err(&ps, h, |g, v| {
                    let a = g.l2_normalize(v[0]).unwrap();
                    let b = g.l2_normalize(v[1]).unwrap();
                    g.info_nce(a, b, tau, symmetric).unwrap()
                })
            }),
        ),
        (
            "mse",
            Box::new(move |r, s| {
                let ps = [{
                    let sh = [
                        r.random_range(1..4),
                        1,
                        r.random_range(1..5),
                        r.random_range(1..5),
                    ];
                    uniform(r, &sh)
                }];
                grad_rel_err(&ps, h, |g, v| target_mse(g, v[0], s))
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(move |r, _| {
                let (n, k) = (r.random_range(1..5), r.random_range(2..5));
                let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
                let ps = [uniform(r, &[n, k])];
                grad_rel_err(&ps, h, |g, v| {
                    g.softmax_cross_entropy(v[0], &labels).unwrap()
                })
            }),
        ),
        (
            "bce_with_logits",
            Box::new(move |r, s| {
                let shape = [
                    r.random_range(1..3),
                    1,
                    r.random_range(1..4),
                    r.random_range(1..4),
                ];
                let mut tr = rng_from_seed(s);
                let n: usize = shape.iter().product();
                let t = Tensor::new(
                    shape.to_vec(),
                    (0..n)
                        .map(|_| if tr.random_bool(0.3) { 1.0 } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                let ps = [uniform(r, &shape)];
                grad_rel_err(&ps, h, |g, v| g.bce_with_logits(v[0], t.clone()).unwrap())
            }),
        ),
    ]
}

/// InfoNCE on the projected representations plus restoration MSE through a
/// full U-Net, differentiated with respect to every parameter.
fn composed_rel_err(r: &mut tower_core::rng::TowerRng, s: u64) -> f64 {
    let cfg = UNetConfig {
        base_channels: 2,
        depth: 1,
        head_hidden: 16,
        embed_dim: 3,
        ..UNetConfig::default()
    };
    let (net, st) = UNet::init::<f64, _>(&cfg, &mut rng_from_seed(s)).unwrap();
    let (n, side) = (r.random_range(3..5), 2 * r.random_range(1..4));
    let x = Tensor::new(
        vec![n, 1, side, side],
        (0..n * side * side).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap();
    let xt = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect()).unwrap();
    // Zero biases put dead regions exactly on a ReLU kink; probe a generic point.
    let params: Vec<Tensor<f64>> = st
        .params()
        .iter()
        .map(|p| {
            let mut v = p.value.clone();
            if p.name.ends_with(".b") {
                v.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = r.random_range(-0.2..0.2));
            }
            v
        })
        .collect();
    fd_rel_err(&params, 1e-6, |ps| {
        let mut local = st.clone();
        for (p, v) in local.params_mut().iter_mut().zip(ps) {
            p.value = v.clone();
        }
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let b = g.input(xt.clone());
        let ea = net.forward_encoder(&mut g, &local, a, true).unwrap();
        let eb = net.forward_encoder(&mut g, &local, b, true).unwrap();
        let za = net
            .forward_head(&mut g, &local, ea.representation, true)
            .unwrap();
        let zb = net
            .forward_head(&mut g, &local, eb.representation, true)
            .unwrap();
        let con = contrastive_on_graph(&mut g, za, zb, 0.5, false).unwrap();
        let dec = net.forward_decoder(&mut g, &local, &eb, true).unwrap();
        let gen = g.mse(dec.output, x.clone()).unwrap();
        let loss = tower_on_graph(&mut g, Some(con), Some(gen), 1.0).unwrap();
        (g, loss)
    })
}

#[test]
fn c1_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut checks = 0;
    for (name, case) in primitive_cases() {
        let mut rng = rng_from_seed(1000);
        let w = (0..20u64).map(|i| case(&mut rng, i)).fold(0.0, f64::max);
        checks += 20;
        worst.push((name.into(), w));
    }
    let mut rng = rng_from_seed(2000);
    let w = (0..20u64)
        .map(|i| composed_rel_err(&mut rng, i))
        .fold(0.0, f64::max);
    checks += 20;
    worst.push(("info_nce+mse u-net".into(), w));
    let elapsed = t0.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let bad: Vec<String> = worst
        .iter()
        .filter(|w| w.1 >= 1e-3)
        .map(|w| format!("{}={:.2e}", w.0, w.1))
        .collect();
    let pass = bad.is_empty() && elapsed < Duration::from_secs(60);
    verdict(
        "C1",
        "gradient correctness",
        pass,
        &format!(
            "{checks} checks over {} ops, max rel err {max:.2e} (< 1e-3), {:.1}s (< 60s){}",
            worst.len(),
            elapsed.as_secs_f64(),
            if bad.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", bad.join(" "))
            }
        ),
    );
}

// ---------------------------------------------------------------- C2

fn pair(z: &[[f64; 2]; 2], zt: &[[f64; 2]; 2]) -> PairBatch<f64> {
    let t =
        |m: &[[f64; 2]; 2]| Tensor::new(vec![2, 2], m.iter().flatten().copied().collect()).unwrap();
    PairBatch {
        z: t(z),
        z_t: t(zt),
        tau: 0.1,
    }
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn c2_loss_oracles() {
    let _g = serial();
    let orth = info_nce(&pair(&[[1.0, 0.0], [0.0, 1.0]], &[[1.0, 0.0], [0.0, 1.0]])).unwrap();
    let same = info_nce(&pair(&[[0.6, 0.8], [0.6, 0.8]], &[[0.6, 0.8], [0.6, 0.8]])).unwrap();
    let nce_ok = (orth - 9.0799e-5).abs() < 1e-6 && (same - 3f64.ln()).abs() < 1e-6;

    let mut rng = rng_from_seed(7);
    let mut mse_ok = true;
    for _ in 0..100 {
        let (n, h, w) = (
            rng.random_range(1..5),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let mk = |rng: &mut tower_core::rng::TowerRng| {
            (0..n)
                .map(|_| Image::<f64>::from_fn(h, w, 1, |_, _, _| rng.random::<f64>()))
                .collect::<Vec<_>>()
        };
        let (x, y) = (mk(&mut rng), mk(&mut rng));
        let mut oracle = 0.0;
        for (a, b) in x.iter().zip(&y) {
            let mut sq = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let d = a.get(r, c, 0) - b.get(r, c, 0);
                    sq += d * d;
                }
            }
            oracle += sq / (h * w) as f64;
        }
        mse_ok &= mse_restoration(&x, &y).unwrap() == oracle;
    }

    let mut auc_ok = true;
    for b in 0..100 {
        let n = rng.random_range(2..60);
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0..(5 + b % 20)) as f64) / 4.0)
            .collect();
        auc_ok &= binary_auc(&scores, &positive).unwrap() == pairwise_auc(&scores, &positive);
    }

    let mut dice_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let p: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        let q: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        let (mut inter, mut sp, mut sq) = (0.0, 0.0, 0.0);
        for i in 0..n {
            inter += (p[i] & q[i]) as f64;
            sp += p[i] as f64;
            sq += q[i] as f64;
        }
        let oracle = if sp + sq == 0.0 {
            1.0
        } else {
            2.0 * inter / (sp + sq)
        };
        dice_ok &= dice(&p, &q).unwrap() == oracle;
    }
    verdict(
        "C2",
        "loss oracles",
        nce_ok && mse_ok && auc_ok && dice_ok,
        &format!("info_nce {orth:.4e} / {same:.9} (ln 3 = {:.9}), mse exact {mse_ok}, auc exact {auc_ok}, dice exact {dice_ok}", 3f64.ln()),
    );
}

// ---------------------------------------------------------------- C3

/// Per-pixel rays rasterizer: a pixel is cleared when it lies in the disc or
/// within the thickness square of a pixel whose minor-axis coordinate is the
/// half-up rounding of the exact line through the two endpoints.
fn brute_rays(
    center: (usize, usize),
    rays: usize,
    thick: usize,
    disc: f64,
    h: usize,
    w: usize,
    offset: f64,
) -> Vec<u8> {
    let lines: Vec<((i64, i64), (i64, i64))> = (0..rays)
        .map(|k| {
            let angle = offset + std::f64::consts::TAU * k as f64 / rays as f64;
            let (er, ec) = ray_endpoint(center, angle, h, w);
            ((center.0 as i64, center.1 as i64), (er as i64, ec as i64))
        })
        .collect();
    let on_line = |r: i64, c: i64, a: (i64, i64), b: (i64, i64)| -> bool {
        let (dr, dc) = (b.0 - a.0, b.1 - a.1);
        let n = dr.abs().max(dc.abs());
        if n == 0 {
            return (r, c) == a;
        }
        let (major, minor, dmaj, dmin, a_maj, a_min) = if dc.abs() >= dr.abs() {
            (c, r, dc, dr, a.1, a.0)
        } else {
            (r, c, dr, dc, a.0, a.1)
        };
        let i = (major - a_maj) * dmaj.signum();
        if i < 0 || i > n {
            return false;
        }
        // minor = a_min + floor(i*dmin/n + 1/2)
        minor - a_min == (2 * i * dmin + n).div_euclid(2 * n)
    };
    let t = thick.max(1) as i64;
    let (lo, hi) = (-(t - 1) / 2, t / 2);
    let mut out = vec![1u8; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (dy, dx) = (r as f64 - center.0 as f64, c as f64 - center.1 as f64);
            let in_disc = disc > 0.0 && dy * dy + dx * dx <= disc * disc;
            let hit = lines.iter().any(|&(a, b)| {
                (lo..=hi).any(|dr| (lo..=hi).any(|dc| on_line(r - dr, c - dc, a, b)))
            });
            if in_disc || hit {
                out[r as usize * w + c as usize] = 0;
            }
        }
    }
    out
}

#[test]
fn c3_transform_correctness() {
    let _g = serial();
    let mut notes = Vec::new();
    let probes: Vec<f64> = (0..=10_000).map(|i| i as f64 / 10_000.0).collect();

    let id = build_translation(&ControlPoints::<f64>::identity(), DEFAULT_RESOLUTION).unwrap();
    let rev = build_translation(&ControlPoints::<f64>::reversed(), DEFAULT_RESOLUTION).unwrap();
    let lin_err = probes
        .iter()
        .map(|&p| {
            (id.lookup(p) - p)
                .abs()
                .max((rev.lookup(p) - (1.0 - p)).abs())
        })
        .fold(0.0, f64::max);
    let lin_ok = lin_err <= 1e-3;
    notes.push(format!("linear cases err {lin_err:.1e}"));

    let mut mono_ok = true;
    let mut trip = 0.0f64;
    for seed in 0..100 {
        let cp: ControlPoints<f64> =
            sample_control_points(&mut rng_from_seed(seed), Direction::Random);
        let t = build_translation(&cp, DEFAULT_RESOLUTION).unwrap();
        let inc = cp.direction() == Some(Direction::Increasing);
        let ys: Vec<f64> = probes.iter().map(|&p| t.lookup(p)).collect();
        mono_ok &= ys
            .windows(2)
            .all(|w| if inc { w[1] >= w[0] } else { w[1] <= w[0] });
        let inv = t.inverted();
        trip = probes
            .iter()
            .map(|&p| (inv.lookup(t.lookup(p)) - p).abs())
            .fold(trip, f64::max);
    }
    let trip_ok = trip <= 2e-3;
    notes.push(format!(
        "monotone over 100 curves x 10001 probes {mono_ok}, round-trip {trip:.1e}"
    ));

    let mut rng = rng_from_seed(3);
    let mut ratio_ok = true;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let ratio = rng.random::<f64>();
        let width = rng.random_range(1..=h.min(w).min(6));
        let vertical = rng.random_bool(0.5);
        let orient = if vertical {
            StripeOrientation::Vertical
        } else {
            StripeOrientation::Horizontal
        };
        let m = stripe_mask(ratio, orient, width, h, w, &mut rng).unwrap();
        let band = width as f64 / if vertical { w } else { h } as f64;
        ratio_ok &= (m.masked_fraction() - ratio).abs() <= band + 1e-12;
        let size = rng.random_range(1..8);
        let m = block_mask(ratio, size, h, w, &mut rng).unwrap();
        let cell = (size.min(h) * size.min(w)) as f64 / (h * w) as f64;
        ratio_ok &= (m.masked_fraction() - ratio).abs() <= cell + 1e-12;
    }
    notes.push(format!("stripe/block ratio bound {ratio_ok}"));

    let mut fixtures = 0;
    let mut rays_ok = true;
    for r0 in 0..9 {
        for c0 in 0..9 {
            for (k, &(rays, thick, disc)) in [
                (1, 1, 0.0),
                (3, 1, 1.0),
                (4, 2, 0.0),
                (7, 1, 1.5),
                (12, 3, 2.0),
                (80, 1, 0.0),
            ]
            .iter()
            .enumerate()
            {
                let offset = rng.random_range(0.0..std::f64::consts::TAU) * (k % 2) as f64;
                let spec = MaskSpec::defaults(MaskKind::Rays, 9, 9);
                let m =
                    rays_mask_with_offset((r0, c0), rays, thick, disc, 9, 9, offset, spec).unwrap();
                rays_ok &=
                    m.bits() == brute_rays((r0, c0), rays, thick, disc, 9, 9, offset).as_slice();
                fixtures += 1;
            }
        }
    }
    notes.push(format!(
        "rays bit-equal on {fixtures} 9x9 fixtures {rays_ok}"
    ));
    verdict(
        "C3",
        "transform correctness",
        lin_ok && mono_ok && trip_ok && ratio_ok && rays_ok,
        &notes.join(", "),
    );
}

// ---------------------------------------------------------------- shared arms

struct SeedRuns {
    data: Dataset<f32>,
    arms: HashMap<PretrainArm, PretrainOutput<f32>>,
    probe: HashMap<PretrainArm, f64>,
    seg: HashMap<PretrainArm, Vec<TrialResult>>,
}

struct Bank {
    seeds: Vec<SeedRuns>,
    /// Wall time of the runs C4 needs: data generation and the five
    /// ordering arms (the contrastive-only arm serves C5).
    c4_elapsed: Duration,
}

fn train_cfg(arm: PretrainArm, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: arm,
        seed,
        epochs: 20,
        patience: 20,
        base_channels: 8,
        ..TrainConfig::default()
    }
}

fn probe_cfg(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        linear_probe: true,
        ft_lr: 1e-2,
        ft_epochs: 300,
        ft_patience: 300,
        ft_seed: seed,
        ..FinetuneConfig::default()
    }
}

fn seg_cfg(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        task: TaskKind::Segment,
        ft_lr: 3e-3,
        ft_epochs: 12,
        ft_patience: 12,
        ft_seed: seed,
        loss_target: 0.2,
        ..FinetuneConfig::default()
    }
}

const SEG_TRIALS: u64 = 2;

fn bank() -> &'static Bank {
    static BANK: OnceLock<Bank> = OnceLock::new();
    BANK.get_or_init(|| {
        let mut c4_elapsed = Duration::ZERO;
        let seeds = (0..SEEDS)
            .map(|s| {
                let t0 = Instant::now();
                let data = gen_synthetic_retina::<f32>(N_IMAGES, SIDE, SIDE, 100 + s).unwrap();
                let mut runs = SeedRuns {
                    data,
                    arms: HashMap::new(),
                    probe: HashMap::new(),
                    seg: HashMap::new(),
                };
                c4_elapsed += t0.elapsed();
                for arm in ARMS.into_iter().chain([PretrainArm::ConNlM]) {
                    let t0 = Instant::now();
                    let out = pretrain(&train_cfg(arm, s), &runs.data, None).unwrap();
                    let p =
                        finetune_classify(&out.net, &out.state, &runs.data, &probe_cfg(s), 1.0, 0)
                            .unwrap();
                    let seg = (0..SEG_TRIALS)
                        .map(|t| {
                            finetune_segment(&out.net, &out.state, &runs.data, &seg_cfg(s), 1.0, t)
                                .unwrap()
                        })
                        .collect();
                    runs.probe.insert(arm, p.metric);
                    runs.seg.insert(arm, seg);
                    runs.arms.insert(arm, out);
                    if arm != PretrainArm::ConNlM {
                        c4_elapsed += t0.elapsed();
                    }
                }
                runs
            })
            .collect();
        Bank { seeds, c4_elapsed }
    })
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).0
}

/// Per-arm values over seeds; the criterion compares their means.
fn ordered(v: &HashMap<PretrainArm, Vec<f64>>) -> (bool, String) {
    use PretrainArm::*;
    let m: HashMap<PretrainArm, f64> = v.iter().map(|(a, xs)| (*a, mean(xs))).collect();
    let ok = m[&Random] < m[&GenNl].min(m[&GenM])
        && m[&GenNl].max(m[&GenM]) <= m[&GenNlM]
        && m[&GenNlM] <= m[&Tower]
        && m[&Tower] - m[&Random] >= 0.02;
    let f = |a: PretrainArm| {
        let (mu, sd) = mean_std(&v[&a]);
        format!("{} {mu:.4}+-{sd:.4}", a.name())
    };
    let s = format!(
        "{} < {{{}, {}}} <= {} <= {}, gap {:.4}",
        f(Random),
        f(GenNl),
        f(GenM),
        f(GenNlM),
        f(Tower),
        m[&Tower] - m[&Random]
    );
    (ok, s)
}

#[test]
fn c4_arm_ordering() {
    let _g = serial();
    let b = bank();
    let auc: HashMap<PretrainArm, Vec<f64>> = ARMS
        .iter()
        .map(|&a| (a, b.seeds.iter().map(|s| s.probe[&a]).collect()))
        .collect();
    let dice: HashMap<PretrainArm, Vec<f64>> = ARMS
        .iter()
        .map(|&a| {
            (
                a,
                b.seeds
                    .iter()
                    .map(|s| mean(&s.seg[&a].iter().map(|r| r.metric).collect::<Vec<_>>()))
                    .collect(),
            )
        })
        .collect();
    let (auc_ok, auc_s) = ordered(&auc);
    let (dice_ok, dice_s) = ordered(&dice);
    let budget_ok = b.c4_elapsed < Duration::from_secs(30 * 60);
    verdict(
        "C4",
        "arm ordering",
        auc_ok && dice_ok && budget_ok,
        &format!(
            "AUC [{auc_s}] {auc_ok}; Dice [{dice_s}] {dice_ok}; {:.0}s (< 1800s)",
            b.c4_elapsed.as_secs_f64()
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn c5_decoder_initialization() {
    let _g = serial();
    let b = bank();
    let budget = seg_cfg(0).ft_epochs as f64 + 1.0;
    let epochs = |arm: PretrainArm| -> Vec<f64> {
        b.seeds
            .iter()
            .map(|s| s.seg[&arm][0].epochs_to_target.map_or(budget, |e| e as f64))
            .collect()
    };
    let (tower, con) = (epochs(PretrainArm::Tower), epochs(PretrainArm::ConNlM));
    let (mt, mc) = (median(tower.clone()), median(con.clone()));
    verdict(
        "C5",
        "pre-trained decoder reaches the loss target sooner",
        mt < mc,
        &format!("median epochs to loss 0.2: tower {mt} {tower:?} vs contrastive encoder + random decoder {mc} {con:?} (unreached = {budget})"),
    );
}

#[test]
fn c6_label_fraction_sweep() {
    let _g = serial();
    let b = bank();
    let fractions = [0.1, 0.25, 0.5, 1.0];
    let mut rows = Vec::new();
    for (s, runs) in b.seeds.iter().enumerate() {
        let arms: Vec<Arm<'_, f32>> = [PretrainArm::Tower, PretrainArm::Random]
            .iter()
            .map(|a| Arm {
                name: a.name().into(),
                net: &runs.arms[a].net,
                state: &runs.arms[a].state,
            })
            .collect();
        for mut r in
            label_fraction_sweep(&arms, &fractions, &runs.data, &probe_cfg(s as u64), 1).unwrap()
        {
            r.trial = s;
            rows.push(r);
        }
    }
    let m = matching_fraction(&rows, "tower", "random");
    let curve: Vec<String> = fractions
        .iter()
        .map(|&f| format!("{f}:{:.4}", sweep_mean(&rows, "tower", f).unwrap()))
        .collect();
    verdict(
        "C6",
        "label-fraction sweep",
        m.is_some_and(|f| f < 1.0),
        &format!(
            "random@100% {:.4}; tower {}; tower matches at fraction {m:?}",
            sweep_mean(&rows, "random", 1.0).unwrap(),
            curve.join(" ")
        ),
    );
}

#[test]
fn c7_mask_ratio_curve() {
    let _g = serial();
    let ratios = [0.1, 0.5, 0.9];
    let mut means = Vec::new();
    for &ratio in &ratios {
        let v: Vec<f64> = (0..SEEDS)
            .map(|s| {
                let data = gen_synthetic_retina::<f32>(N_IMAGES, SIDE, SIDE, 100 + s).unwrap();
                let cfg = TrainConfig {
                    mask_kind: MaskKind::Block,
                    mask_ratio: Some(ratio),
                    ..train_cfg(PretrainArm::Tower, s)
                };
                let out = pretrain(&cfg, &data, None).unwrap();
                finetune_classify(&out.net, &out.state, &data, &probe_cfg(s), 1.0, 0)
                    .unwrap()
                    .metric
            })
            .collect();
        means.push(mean(&v));
    }
    verdict(
        "C7",
        "block mask ratio curve",
        means[1] >= means[0] && means[1] >= means[2],
        &format!(
            "probe AUC at ratio 0.1 {:.4}, 0.5 {:.4}, 0.9 {:.4}",
            means[0], means[1], means[2]
        ),
    );
}

// ---------------------------------------------------------------- C8, C9

#[test]
fn c8_determinism() {
    let _g = serial();
    let data = gen_synthetic_retina::<f32>(60, 16, 16, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        base_channels: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pretrain(&cfg, &data, Some(d.path())).unwrap();
    }
    let same = |f: &str| {
        std::fs::read(dirs[0].path().join(f)).unwrap()
            == std::fs::read(dirs[1].path().join(f)).unwrap()
    };
    let (ck, mt) = (same("best.ckpt"), same("metrics.csv"));
    // the plan stream is part of the run: replaying a plan reproduces the view
    let aug = AugmentConfig::for_shape(16, 16, 1, MaskKind::Rays);
    let plan = sample_plan(&mut rng_from_seed(1), ProxyMode::TowerNlM, 0, &aug);
    let view_ok =
        apply_plan(&data.images[0], &plan).unwrap() == apply_plan(&data.images[0], &plan).unwrap();
    verdict(
        "C8",
        "determinism",
        ck && mt && view_ok,
        &format!(
            "checkpoint identical {ck}, metrics identical {mt}, plan replay identical {view_ok}"
        ),
    );
}

/// Set `TOWER_REAL_DATA` to a key = value file describing the dataset
/// (`data`, `data_path`, `labels_path`, `num_classes`, ...).
#[test]
fn c9_real_data_smoke() {
    let _g = serial();
    let Ok(path) = std::env::var("TOWER_REAL_DATA") else {
        std::io::stderr()
            .write_all(b"[SKIP] C9 real-data smoke: TOWER_REAL_DATA not set\n")
            .unwrap();
        return;
    };
    let entries = read_kv_file(std::path::Path::new(&path)).unwrap();
    let mut base = TrainConfig {
        epochs: 20,
        patience: 20,
        base_channels: 8,
        ..TrainConfig::default()
    };
    let mut ft = probe_cfg(0);
    apply_entries(&entries, &mut [&mut base, &mut ft]).unwrap();
    let data = base.data.load::<f32>().unwrap();
    let mut scores: HashMap<PretrainArm, Vec<f64>> = HashMap::new();
    for s in 0..SEEDS {
        for arm in [PretrainArm::Random, PretrainArm::Tower] {
            let out = pretrain(
                &TrainConfig {
                    mode: arm,
                    seed: s,
                    ..base.clone()
                },
                &data,
                None,
            )
            .unwrap();
            let r = finetune_classify(
                &out.net,
                &out.state,
                &data,
                &FinetuneConfig {
                    ft_seed: s,
                    ..ft.clone()
                },
                1.0,
                0,
            )
            .unwrap();
            scores.entry(arm).or_default().push(r.metric);
        }
    }
    let (t, r) = (
        mean(&scores[&PretrainArm::Tower]),
        mean(&scores[&PretrainArm::Random]),
    );
    verdict(
        "C9",
        "real-data smoke",
        t > r,
        &format!("mean test AUC tower {t:.4} vs random {r:.4} over {SEEDS} seeds"),
    );
}
