//! Acceptance checks. Each test prints one `[PASS]` or `[FAIL]` line to the
//! terminal (bypassing the harness's output capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use sslseg::config::ExperimentConfig;
use sslseg::dataset::load_dataset;
use sslseg::experiment::{sweep, ResultRow};
use sslseg_core::contrastive::{contrastive_loss, pretrain_contrastive, ContrastiveConfig, EmbeddingBatch};
use sslseg_core::data::{
    generate_phantom_dataset, generate_subject, load_checkpoint, load_volume, save_checkpoint, save_volume,
    split_manifest, DataError, Manifest, PhantomConfig, SplitCounts, SubjectEntry,
};
use sslseg_core::finetune::{dice_loss, dice_score};
use sslseg_core::gradcheck::{check_program, Report};
use sslseg_core::model::{build_model, is_encoder_param, HeadKind, ModelError, ModelParams, UNetConfig};
use sslseg_core::regression::{corrupt_image, masked_l1_loss, CorruptionConfig, CorruptionMask};
use sslseg_core::rng::{stream, Rng as Stream};
use sslseg_core::train::{PlateauScheduler, ScheduleConfig};
use sslseg_core::{Tape, Tensor, Var};

fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!("[{}] {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{criterion}: {detail}");
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---- gradient suite ----

fn uniform(r: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Magnitudes in `[0.05, 1]` with random signs.
fn off_zero(r: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.05 apart in random order.
fn separated(r: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn weighted_sum(t: &mut Tape<f64>, y: Var, r: &mut Stream) -> Var {
    let w = uniform(r, t.shape(y), -1.0, 1.0);
    let p = t.mul_const(y, &w).unwrap();
    t.sum(p)
}

fn dim(r: &mut Stream, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

type Instance = Box<dyn Fn(&mut Stream) -> Vec<Report>>;

/// A unary op applied to one generated input and reduced by a random
/// weighted sum.
fn unary(gen: impl Fn(&mut Stream) -> Tensor<f64> + 'static, op: impl Fn(&mut Tape<f64>, Var) -> Var + 'static) -> Instance {
    Box::new(move |r| {
        let x = gen(r);
        let seed = r.random::<u64>();
        check_program(&[x], |t, v| {
            let y = op(t, v[0]);
            Ok(weighted_sum(t, y, &mut stream(seed, &[])))
        })
    })
}

fn binary(
    gen: impl Fn(&mut Stream) -> (Tensor<f64>, Tensor<f64>) + 'static,
    op: impl Fn(&mut Tape<f64>, Var, Var) -> Var + 'static,
) -> Instance {
    Box::new(move |r| {
        let (a, b) = gen(r);
        let seed = r.random::<u64>();
        check_program(&[a, b], |t, v| {
            let y = op(t, v[0], v[1]);
            Ok(weighted_sum(t, y, &mut stream(seed, &[])))
        })
    })
}

fn image_shape(r: &mut Stream, even: bool) -> Vec<usize> {
    let s = |r: &mut Stream| if even { 2 * dim(r, 1, 3) } else { dim(r, 2, 6) };
    vec![dim(r, 1, 2), dim(r, 1, 3), s(r), s(r)]
}

fn op_instances() -> Vec<(&'static str, Instance)> {
    vec![
        (
            "conv2d",
            Box::new(|r: &mut Stream| {
                let (b, cin, cout, k) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), [1, 3][dim(r, 0, 1)]);
                let (h, w) = (dim(r, 3, 6), dim(r, 3, 6));
                let x = uniform(r, &[b, cin, h, w], -1.0, 1.0);
                let wt = uniform(r, &[cout, cin, k, k], -1.0, 1.0);
                let bias = uniform(r, &[cout], -1.0, 1.0);
                let seed = r.random::<u64>();
                check_program(&[x, wt, bias], |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2])?;
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }) as Instance,
        ),
        ("relu", unary(|r| { let s = image_shape(r, false); off_zero(r, &s) }, |t, x| t.relu(x))),
        ("max_pool2", unary(|r| { let s = image_shape(r, true); separated(r, &s) }, |t, x| t.max_pool2(x).unwrap())),
        ("avg_pool2", unary(|r| { let s = image_shape(r, true); uniform(r, &s, -1.0, 1.0) }, |t, x| t.avg_pool2(x).unwrap())),
        (
            "upsample_nearest2",
            unary(|r| { let s = image_shape(r, false); uniform(r, &s, -1.0, 1.0) }, |t, x| t.upsample_nearest2(x).unwrap()),
        ),
        (
            "instance_norm",
            Box::new(|r: &mut Stream| {
                let s = image_shape(r, false);
                let x = uniform(r, &s, -1.0, 1.0);
                let g = uniform(r, &[s[1]], 0.5, 1.5);
                let b = uniform(r, &[s[1]], -0.5, 0.5);
                let seed = r.random::<u64>();
                check_program(&[x, g, b], |t, v| {
                    let y = t.instance_norm(v[0], v[1], v[2])?;
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }),
        ),
        (
            "linear",
            Box::new(|r: &mut Stream| {
                let (b, f, g) = (dim(r, 1, 3), dim(r, 1, 5), dim(r, 1, 5));
                let x = uniform(r, &[b, f], -1.0, 1.0);
                let w = uniform(r, &[g, f], -1.0, 1.0);
                let bias = uniform(r, &[g], -1.0, 1.0);
                let seed = r.random::<u64>();
                check_program(&[x, w, bias], |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }),
        ),
        (
            "concat_channels",
            binary(
                |r| {
                    let s = image_shape(r, false);
                    let mut s2 = s.clone();
                    s2[1] = dim(r, 1, 3);
                    (uniform(r, &s, -1.0, 1.0), uniform(r, &s2, -1.0, 1.0))
                },
                |t, a, b| t.concat_channels(a, b).unwrap(),
            ),
        ),
        (
            "global_avg_pool",
            unary(|r| { let s = image_shape(r, false); uniform(r, &s, -1.0, 1.0) }, |t, x| t.global_avg_pool(x).unwrap()),
        ),
        ("add", binary(same_pair, |t, a, b| t.add(a, b).unwrap())),
        ("sub", binary(same_pair, |t, a, b| t.sub(a, b).unwrap())),
        ("mul", binary(same_pair, |t, a, b| t.mul(a, b).unwrap())),
        (
            "div",
            binary(
                |r| {
                    let s = image_shape(r, false);
                    let d = off_zero(r, &s).map(|v| v.signum() * (0.5 + v.abs()));
                    (uniform(r, &s, -1.0, 1.0), d)
                },
                |t, a, b| t.div(a, b).unwrap(),
            ),
        ),
        (
            "affine",
            Box::new(|r: &mut Stream| {
                let s = image_shape(r, false);
                let x = uniform(r, &s, -1.0, 1.0);
                let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
                let seed = r.random::<u64>();
                check_program(&[x], |t, v| {
                    let y = t.affine(v[0], a, b);
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }),
        ),
        (
            "mul_const",
            Box::new(|r: &mut Stream| {
                let s = image_shape(r, false);
                let (x, c) = (uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0));
                check_program(&[x], |t, v| {
                    let y = t.mul_const(v[0], &c)?;
                    Ok(t.sum(y))
                })
            }),
        ),
        (
            "add_const",
            Box::new(|r: &mut Stream| {
                let s = image_shape(r, false);
                let (x, c) = (uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0));
                let seed = r.random::<u64>();
                check_program(&[x], |t, v| {
                    let y = t.add_const(v[0], &c)?;
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }),
        ),
        ("abs", unary(|r| { let s = image_shape(r, false); off_zero(r, &s) }, |t, x| t.abs(x))),
        (
            "sum",
            Box::new(|r: &mut Stream| {
                let s = image_shape(r, false);
                let x = uniform(r, &s, -1.0, 1.0);
                check_program(&[x], |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                })
            }),
        ),
        (
            "mean",
            Box::new(|r: &mut Stream| {
                let s = image_shape(r, false);
                let x = uniform(r, &s, -1.0, 1.0);
                check_program(&[x], |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.mean(sq))
                })
            }),
        ),
        (
            "sum_per_channel",
            unary(|r| { let s = image_shape(r, false); uniform(r, &s, -1.0, 1.0) }, |t, x| t.sum_per_channel(x).unwrap()),
        ),
        (
            "narrow",
            Box::new(|r: &mut Stream| {
                let (n, d) = (dim(r, 2, 6), dim(r, 1, 4));
                let start = dim(r, 0, n - 1);
                let len = dim(r, 1, n - start);
                let x = uniform(r, &[n, d], -1.0, 1.0);
                let seed = r.random::<u64>();
                check_program(&[x], |t, v| {
                    let y = t.narrow(v[0], start, len)?;
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }),
        ),
        (
            "softmax_axis1",
            unary(|r| { let s = image_shape(r, false); uniform(r, &s, -2.0, 2.0) }, |t, x| t.softmax_axis1(x).unwrap()),
        ),
        (
            "l2_normalize_axis1",
            unary(
                |r| {
                    let s = [dim(r, 1, 4), dim(r, 2, 6)];
                    uniform(r, &s, -1.0, 1.0)
                },
                |t, x| t.l2_normalize_axis1(x).unwrap(),
            ),
        ),
        (
            "matmul_nt",
            binary(
                |r| {
                    let (m, n, d) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 5));
                    (uniform(r, &[m, d], -1.0, 1.0), uniform(r, &[n, d], -1.0, 1.0))
                },
                |t, a, b| t.matmul_nt(a, b).unwrap(),
            ),
        ),
        (
            "cross_entropy_rows",
            Box::new(|r: &mut Stream| {
                let (m, n) = (dim(r, 1, 5), dim(r, 2, 6));
                let x = uniform(r, &[m, n], -3.0, 3.0);
                let targets: Vec<usize> = (0..m).map(|_| dim(r, 0, n - 1)).collect();
                check_program(&[x], |t, v| t.cross_entropy_rows(v[0], &targets))
            }),
        ),
        (
            "patch_pool",
            Box::new(|r: &mut Stream| {
                let s = vec![dim(r, 1, 2), dim(r, 1, 3), dim(r, 4, 8), dim(r, 4, 8)];
                let size = dim(r, 1, 3);
                let patches: Vec<[usize; 3]> =
                    (0..dim(r, 1, 5)).map(|_| [dim(r, 0, s[0] - 1), dim(r, 0, s[2] - size), dim(r, 0, s[3] - size)]).collect();
                let x = uniform(r, &s, -1.0, 1.0);
                let seed = r.random::<u64>();
                check_program(&[x], |t, v| {
                    let y = t.patch_pool(v[0], &patches, size)?;
                    Ok(weighted_sum(t, y, &mut stream(seed, &[])))
                })
            }),
        ),
    ]
}

fn same_pair(r: &mut Stream) -> (Tensor<f64>, Tensor<f64>) {
    let s = image_shape(r, false);
    (uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0))
}

fn loss_instances() -> Vec<(&'static str, Instance)> {
    vec![
        (
            "masked L1 loss",
            Box::new(|r: &mut Stream| {
                let s = [dim(r, 1, 2), 1, dim(r, 3, 8), dim(r, 3, 8)];
                let reference = uniform(r, &s, 0.0, 1.0);
                let (_, mask) = corrupt_image(&reference, &CorruptionConfig { fraction: 0.3, ..CorruptionConfig::default() }, r);
                let offset = off_zero(r, &s);
                let recon = Tensor::from_fn(s.to_vec(), |i| reference.data()[i] + offset.data()[i]);
                check_program(&[recon], |t, v| masked_l1_loss(t, v[0], &reference, &mask))
            }),
        ),
        (
            "contrastive loss",
            Box::new(|r: &mut Stream| {
                let (m, n, d) = (dim(r, 1, 4), dim(r, 2, 6), dim(r, 2, 6));
                let a = uniform(r, &[m, d], -1.0, 1.0);
                let c = uniform(r, &[n, d], -1.0, 1.0);
                let positives: Vec<usize> = (0..m).map(|_| dim(r, 0, n - 1)).collect();
                let tau = [0.1, 0.5, 1.0][dim(r, 0, 2)];
                check_program(&[a, c], |t, v| {
                    let batch = EmbeddingBatch { anchors: v[0], candidates: v[1], positive_index: positives.clone() };
                    Ok(contrastive_loss(t, &batch, tau).unwrap())
                })
            }),
        ),
        (
            "Dice loss",
            Box::new(|r: &mut Stream| {
                let s = [dim(r, 1, 2), dim(r, 2, 3), dim(r, 2, 8), dim(r, 2, 8)];
                let scores = uniform(r, &s, -2.0, 2.0);
                let labels: Vec<u8> = (0..s[0] * s[2] * s[3]).map(|_| dim(r, 0, s[1] - 1) as u8).collect();
                check_program(&[scores], |t, v| dice_loss(t, v[0], &labels))
            }),
        ),
    ]
}

fn tiny() -> UNetConfig {
    UNetConfig { depth: 2, base_channels: 4, global_hidden_dim: 16, global_embed_dim: 8, local_embed_dim: 8, ..UNetConfig::default() }
}

fn tensor_err(e: ModelError) -> sslseg_core::TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Gradient of a head loss through the whole network with respect to a few
/// parameter tensors spread over encoder, decoder and head.
fn composite(r: &mut Stream, head: HeadKind, size: usize) -> Vec<Report> {
    let m = build_model::<f64>(&tiny(), r.random()).unwrap().swap_heads(head, r.random());
    let names: Vec<&str> = match head {
        HeadKind::Segmentation => vec!["enc0.conv1.weight", "enc1.norm2.gain", "dec0.conv2.weight", "head.seg.weight"],
        _ => vec!["enc0.conv1.weight", "dec0.conv1.weight", "head.local.weight", "head.local.bias"],
    };
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.get(n).unwrap().clone()).collect();
    let x = uniform(r, &[1, 1, size, size], 0.0, 1.0);
    let labels: Vec<u8> = (0..size * size).map(|_| dim(r, 0, 1) as u8).collect();
    let seed = r.random::<u64>();
    check_program(&inputs, |t, v| {
        let mut bound = m.bind(t, |_| false);
        for (n, &var) in names.iter().zip(v) {
            bound.replace(n, var);
        }
        let xv = t.constant(x.clone());
        let out = m.forward(t, &bound, xv).map_err(tensor_err)?;
        match head {
            HeadKind::Segmentation => dice_loss(t, out.head_output, &labels),
            _ => Ok(weighted_sum(t, out.head_output, &mut stream(seed, &[]))),
        }
    })
}

#[test]
fn gradient_suite() {
    const INSTANCES: u64 = 10;
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (kind, list, tol) in [("op", op_instances(), 1e-4), ("loss", loss_instances(), 1e-4)] {
        for (name, instance) in &list {
            cases += 1;
            for i in 0..INSTANCES {
                let reports = instance(&mut stream(i, &[sslseg_core::rng::key(name)]));
                for (k, rep) in reports.iter().enumerate() {
                    checked += rep.checked;
                    worst = worst.max(rep.max_rel_error);
                    if !(rep.max_rel_error < tol) || rep.skipped > 0 {
                        failures.push(format!(
                            "{kind} {name} instance {i} input {k}: rel err {:.2e}, {} skipped",
                            rep.max_rel_error, rep.skipped
                        ));
                    }
                }
            }
        }
    }
    let mut composite_worst: f64 = 0.0;
    let mut composite_skipped = 0;
    let mut composite_total = 0;
    for (label, head, size) in [("UNet + Dice 8x8", HeadKind::Segmentation, 8), ("UNet + local head 16x16", HeadKind::Local, 16)] {
        cases += 1;
        for i in 0..INSTANCES {
            for (k, rep) in composite(&mut stream(i, &[sslseg_core::rng::key(label)]), head, size).iter().enumerate() {
                composite_worst = composite_worst.max(rep.max_rel_error);
                composite_skipped += rep.skipped;
                composite_total += rep.checked + rep.skipped;
                checked += rep.checked;
                if !(rep.max_rel_error < 1e-3) {
                    failures.push(format!("{label} instance {i} input {k}: rel err {:.2e}", rep.max_rel_error));
                }
            }
        }
    }
    if composite_skipped * 20 > composite_total {
        failures.push(format!("composites: {composite_skipped} of {composite_total} entries straddle kinks"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 120.0 {
        failures.push(format!("runtime {elapsed:.1}s"));
    }
    for f in &failures {
        let _ = std::io::stderr().write_all(format!("    {f}\n").as_bytes());
    }
    report(
        "gradient suite",
        failures.is_empty(),
        &format!(
            "{cases} cases x {INSTANCES} instances, {checked} entries, max rel err {worst:.2e} (ops/losses), \
             {composite_worst:.2e} (composites, {composite_skipped}/{composite_total} kink entries skipped), {elapsed:.1}s"
        ),
    );
}

// ---- closed-form oracles ----

fn contrastive_value(anchors: Tensor<f64>, candidates: Tensor<f64>, positives: Vec<usize>, tau: f64) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(anchors);
    let c = t.constant(candidates);
    let l = contrastive_loss(&mut t, &EmbeddingBatch { anchors: a, candidates: c, positive_index: positives }, tau).unwrap();
    t.value(l).item()
}

#[test]
fn closed_form_loss_oracles() {
    let mut notes = Vec::new();
    let mut pass = true;
    for n in [2usize, 4, 16] {
        let v = Tensor::from_fn([n, 4], |i| [0.3, -0.5, 0.1, 0.8][i % 4]);
        let l = contrastive_value(v.clone(), v, (0..n).collect(), 0.1);
        let err = (l - (n as f64).ln()).abs();
        pass &= err <= 1e-9;
        notes.push(format!("ln{n} err {err:.1e}"));
    }
    let a = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let c = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let two = contrastive_value(a, c, vec![0], 0.1);
    let err = (two - (-10.0f64).exp().ln_1p()).abs();
    pass &= err <= 1e-12;
    notes.push(format!("two-vector err {err:.1e}"));

    let reference = Tensor::<f32>::new([1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let mask = CorruptionMask { mask: Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap() };
    let mut t = Tape::new();
    let recon = t.constant(Tensor::new([1, 1, 2, 2], vec![0.3, 0.4, 0.6, 1.0]).unwrap());
    let l1 = masked_l1_loss(&mut t, recon, &reference, &mask).unwrap();
    let l1 = t.value(l1).item();
    pass &= l1 == 0.15f32;
    notes.push(format!("masked L1 {l1}"));

    let d = dice_score(&[1, 1, 0, 0], &[0, 1, 0, 1], 1);
    pass &= d == 0.5;
    notes.push(format!("Dice {d}"));
    report("closed-form loss oracles", pass, &notes.join(", "));
}

// ---- masking ----

#[test]
fn masking_exactness() {
    let mut r = stream(2024, &[]);
    let config = CorruptionConfig::default();
    let mut pass = true;
    let mut sizes = Vec::new();
    for _ in 0..10 {
        let (b, h, w) = (dim(&mut r, 1, 3), dim(&mut r, 4, 96), dim(&mut r, 4, 96));
        let x = uniform(&mut r, &[b, 1, h, w], 0.0, 1.0);
        let (xh, mask) = corrupt_image(&x, &config, &mut r);
        let want = (0.10 * (h * w) as f64).round() as usize;
        for (bi, m) in mask.mask.data().chunks(h * w).enumerate() {
            pass &= m.iter().filter(|&&v| v != 0.0).count() == want;
            for (i, &mv) in m.iter().enumerate() {
                let j = bi * h * w + i;
                if mv == 0.0 {
                    pass &= xh.data()[j].to_bits() == x.data()[j].to_bits();
                }
            }
        }
        sizes.push(format!("{h}x{w}"));
    }
    let x = Tensor::<f64>::zeros([1, 1, 250, 400]);
    let all = CorruptionConfig { fraction: 1.0, ..config };
    let (noise, _) = corrupt_image(&x, &all, &mut stream(7, &[]));
    let n = noise.numel() as f64;
    let mean = noise.data().iter().sum::<f64>() / n;
    let std = (noise.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let rel = (std / 0.01 - 1.0).abs();
    pass &= rel < 0.02;
    report(
        "masking exactness",
        pass,
        &format!("sizes {}; noise std {std:.5} over {n} draws ({:.2}% off)", sizes.join(" "), 100.0 * rel),
    );
}

// ---- head discard and freeze ----

fn bytes(m: &ModelParams<f32>, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<u32>)> {
    m.backbone().filter(|(k, _)| keep(k)).map(|(k, v)| (k.to_string(), v.data().iter().map(|x| x.to_bits()).collect())).collect()
}

#[test]
fn head_discard_and_freeze() {
    let config = PhantomConfig { height: 32, width: 32, slices: 2, seed: 3, ..PhantomConfig::default() };
    let images: Vec<Tensor<f32>> = generate_phantom_dataset(&config, 8).unwrap().iter().flat_map(|v| v.images()).collect();
    let model = build_model::<f32>(&tiny(), 5).unwrap();
    let schedule = ScheduleConfig { epochs: 2, batch_size: 8, ..ScheduleConfig::default() };
    let contrastive = ContrastiveConfig { batch_size: 8, freeze_encoder: true, ..ContrastiveConfig::default() };
    let out = pretrain_contrastive(
        &model,
        &images,
        &contrastive,
        &Default::default(),
        &sslseg_core::contrastive::AugmentationConfig::local_default(),
        &schedule,
        &schedule,
    )
    .unwrap();
    let frozen = bytes(&out.params, is_encoder_param) == bytes(&out.global_stage, is_encoder_param);
    let decoder_moved = bytes(&out.params, |k| !is_encoder_param(k)) != bytes(&out.global_stage, |k| !is_encoder_param(k));
    let before = bytes(&out.params, |_| true);
    let swapped: Vec<bool> = HeadKind::ALL.iter().map(|&h| bytes(&out.params.swap_heads(h, 1), |_| true) == before).collect();
    let discard = swapped.iter().all(|&b| b);
    report(
        "head-discard and freeze contracts",
        frozen && decoder_moved && discard,
        &format!("encoder frozen during local stage: {frozen}, decoder trained: {decoder_moved}, backbone kept by all head swaps: {discard}"),
    );
}

// ---- scheduler ----

/// Epochs (0-based) after which the learning rate is halved, from the rule
/// "halve once `patience` consecutive epochs bring no improvement beyond
/// `min_delta` over the best loss so far; then count afresh".
fn expected_halvings(losses: &[f64], patience: usize, min_delta: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut best = f64::INFINITY;
    let mut since = 0;
    for (e, &l) in losses.iter().enumerate() {
        if best - l > min_delta {
            best = l;
            since = 0;
            continue;
        }
        since += 1;
        if since == patience {
            out.push(e);
            since = 0;
        }
    }
    out
}

#[test]
fn scheduler_oracle() {
    let config = ScheduleConfig { plateau_patience: 20, plateau_min_delta: 1e-4, initial_lr: 1e-3, ..ScheduleConfig::default() };
    let mut r = stream(99, &[]);
    let mut sequences: Vec<(String, Vec<f64>)> = vec![
        ("constant".into(), vec![0.5; 100]),
        ("improving".into(), (0..100).map(|e| 1.0 - 0.01 * e as f64).collect()),
        ("sub-threshold".into(), (0..100).map(|e| 1.0 - 0.5e-4 * e as f64).collect()),
        ("late drop".into(), (0..100).map(|e| if e < 30 { 0.8 } else if e < 60 { 0.5 } else { 0.6 }).collect()),
    ];
    for k in 0..6 {
        let mut v = 1.0;
        let walk = (0..150)
            .map(|_| {
                v += r.random_range(-0.01..0.008);
                v
            })
            .collect();
        sequences.push((format!("random walk {k}"), walk));
    }
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, losses) in &sequences {
        let mut s = PlateauScheduler::new(&config);
        let mut last = s.lr();
        let mut halvings = Vec::new();
        for (e, &l) in losses.iter().enumerate() {
            let lr = s.step(l);
            pass &= lr <= last;
            if lr < last {
                pass &= lr == last * 0.5;
                halvings.push(e);
            }
            last = lr;
        }
        let expected = expected_halvings(losses, 20, 1e-4);
        pass &= halvings == expected;
        notes.push(format!("{name} {halvings:?}"));
    }
    report("scheduler oracle", pass, &notes.join("; "));
}

// ---- determinism ----

fn small_config(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
[dataset]
unlabeled_subjects = 6
labeled_subjects = 10
train = 6
val = 1
test = 3
height = 32
width = 32
slices = 2

[model]
depth = 2
base_channels = 4
global_hidden_dim = 16
global_embed_dim = 8
local_embed_dim = 8

[pretrain]
epochs = 2
batch_size = 4

[contrastive]
batch_size = 4

[finetune]
epochs = 2
batch_size = 4
steps_per_epoch = 2
n_values = [1, 2, 4]
seeds = [0, 1]

[output]
dir = "{}"
record_timings = false
"#,
        out.display()
    );
    let path = out.with_extension("toml");
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn sweep_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let config = small_config(&out);
        let data = load_dataset(&config).unwrap();
        let rows = sweep(&config, &data, &out).unwrap();
        (rows.len(), std::fs::read(out.join("results.csv")).unwrap(), std::fs::read(out.join("summary.csv")).unwrap())
    };
    let (n, a, sa) = run("first");
    let (_, b, sb) = run("second");
    report(
        "sweep determinism",
        a == b && sa == sb,
        &format!("{n} result rows (3 methods + baseline), results.csv {} bytes, identical: {}", a.len(), a == b && sa == sb),
    );
}

// ---- trend experiment ----

fn mean_dice(rows: &[ResultRow], method: &str, n: usize) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method && r.n == n).map(|r| r.dice).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[test]
fn trend_experiment() {
    let root = workspace_root();
    let mut config = ExperimentConfig::load(&root.join("configs/trend.toml")).unwrap();
    let out = root.join("target/acceptance/trend");
    let _ = std::fs::remove_dir_all(&out);
    config.output.dir = out.clone();
    let started = Instant::now();
    let data = load_dataset(&config).unwrap();
    let rows = sweep(&config, &data, &out).unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;

    let mut table: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for r in &rows {
        table.entry((r.method.clone(), r.n)).or_insert_with(|| mean_dice(&rows, &r.method, r.n).unwrap());
    }
    let line: Vec<String> = table.iter().map(|((m, n), d)| format!("{m}@{n}={d:.3}")).collect();
    let _ = std::io::stderr().write_all(format!("    seed-averaged test Dice: {}\n", line.join(" ")).as_bytes());

    let get = |m: &str, n: usize| table.get(&(m.to_string(), n)).copied().unwrap_or(f64::NAN);
    let pool = data.train.len();
    let a = get("contrastive", 4) - get("none", 4);
    let b = (get("contrastive", 8) - get("none", pool)).abs();
    let c4 = get("contrastive", 4) - get("regression", 4);
    let c8 = get("contrastive", 8) - get("regression", 8);
    let (pa, pb, pc, pt) = (a >= 0.02, b <= 0.05, c4 >= -0.02 && c8 >= -0.02, minutes < 60.0);
    let detail = format!(
        "(a) contrastive-none at N=4 {a:+.3} [{}]; (b) |contrastive N=8 - full-data N={pool}| {b:.3} [{}]; \
         (c) contrastive-regression {c4:+.3} at N=4, {c8:+.3} at N=8 [{}]; runtime {minutes:.1} min [{}]",
        ok(pa),
        ok(pb),
        ok(pc),
        ok(pt)
    );
    report("trend experiment", pa && pb && pc && pt, &detail);
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

// ---- file formats ----

#[test]
fn file_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;

    let phantom = PhantomConfig { height: 48, width: 64, slices: 3, ..PhantomConfig::default() };
    let v = generate_subject(&phantom, 4).unwrap();
    let vol = dir.path().join("v.sslvol");
    save_volume(&vol, &v).unwrap();
    let back = load_volume(&vol).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let exact = bits(&back.slices) == bits(&v.slices) && back.labels == v.labels && back.subject_id == v.subject_id;
    pass &= exact;
    notes.push(format!("volume bit-exact {exact}"));

    let bytes = std::fs::read(&vol).unwrap();
    let write = |name: &str, data: &[u8]| {
        let p = dir.path().join(name);
        std::fs::write(&p, data).unwrap();
        p
    };
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut long = bytes.clone();
    long.push(0);
    let errors = [
        matches!(load_volume(&write("m", &magic)), Err(DataError::BadMagic { .. })),
        matches!(load_volume(&write("t", &bytes[..bytes.len() - 5])), Err(DataError::Truncated { .. })),
        matches!(load_volume(&write("l", &long)), Err(DataError::SizeMismatch { .. })),
        matches!(load_volume(&write("h", &bytes[..6])), Err(DataError::Truncated { .. } | DataError::BadMagic { .. })),
    ];
    pass &= errors.iter().all(|&e| e);
    notes.push(format!("volume errors (magic, truncated, oversize, cut header) {errors:?}"));

    let entries: Vec<SubjectEntry> = (0..9)
        .map(|i| SubjectEntry {
            subject_id: format!("s{i}"),
            volume: format!("s{i}.sslvol"),
            labels: (i < 6).then(|| format!("s{i}.sslvol")),
        })
        .collect();
    let mut manifest = split_manifest(&entries, SplitCounts { train: 3, val: 1, test: 2 }, 1).unwrap();
    manifest.params = vec![("height".into(), "32".into())];
    let mpath = dir.path().join("manifest.txt");
    manifest.save(&mpath).unwrap();
    let same = Manifest::load(&mpath).unwrap() == manifest;
    let broken = matches!(Manifest::parse(&manifest.to_text().replace(" train\n", " training\n")), Err(DataError::Manifest { .. }));
    pass &= same && broken;
    notes.push(format!("manifest round trip {same}, bad split rejected {broken}"));

    let model = build_model::<f32>(&tiny(), 2).unwrap().swap_heads(HeadKind::Segmentation, 2);
    let cpath = dir.path().join("m.ckpt");
    save_checkpoint(&cpath, &model).unwrap();
    let round = load_checkpoint::<f32>(&cpath).unwrap() == model;
    let raw = std::fs::read(&cpath).unwrap();
    let cut = matches!(load_checkpoint::<f32>(&write("c1", &raw[..raw.len() - 1])), Err(DataError::Truncated { .. }));
    let mut bad = raw.clone();
    bad[0] = b'Z';
    let magic = matches!(load_checkpoint::<f32>(&write("c2", &bad)), Err(DataError::BadMagic { .. }));
    pass &= round && cut && magic;
    notes.push(format!("checkpoint round trip {round}, truncated {cut}, bad magic {magic}"));
    report("file-format round-trips", pass, &notes.join("; "));
}
