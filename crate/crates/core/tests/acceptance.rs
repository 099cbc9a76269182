//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Run with `--nocapture` to see the lines live.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqclr::augment::{apply_op, augment_pair, sample_pipeline, view_rng, BoundOp, OpKind, PipelineSpec};
use seqclr::autograd::gradcheck::max_rel_error;
use seqclr::autograd::{Graph, Var};
use seqclr::config::ExperimentConfig;
use seqclr::data::{render_synthetic, subset_labels, Charset, Dataset, Manifest, RenderSpec, TextImage};
use seqclr::decoders::attention::{self, AttentionDims};
use seqclr::decoders::{ctc_collapse, ctc_loss, DecoderConfig};
use seqclr::encoder::{ProjectionHead, ENCODER_PREFIX, PROJECTION_PREFIX};
use seqclr::metrics::{edit_distance, evaluate, MetricsReport};
use seqclr::nn::{Forward, ParamStore, Trainable};
use seqclr::seqclr::{
    assemble_sets, contrastive_loss, contrastive_loss_var, map_instances, map_instances_var, window_bounds, Instance,
    InstanceSet, MappingChoice, Side,
};
use seqclr::tensor::Tensor;
use seqclr::training::{chance_level, decoder_eval, finetune, pretrain, Checkpoint, Phase, ProtocolSpec};

// tolerances and budgets
const CTC_TOL: f64 = 1e-6;
const NCE_TOL: f64 = 1e-6;
const NCE_QUOTED: f64 = 2.2056;
const CHANCE_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const DIST_TOL: f64 = 1e-6;
const AUG_DRAWS: usize = 10_000;
const METRIC_PAIRS: usize = 10_000;
const SEEDS: [u64; 3] = [0, 1, 2];
const LIMITS: [f64; 9] = [30.0, 10.0, 10.0, 60.0, 60.0, 900.0, 1200.0, 10.0, 300.0];

// desk-scale learning runs
const CORPUS: usize = 500;
const TEST_CORPUS: usize = 200;
const PRETRAIN_STEPS: usize = 300;
const DECODER_EVAL_STEPS: usize = 1000;
const FINETUNE_STEPS: usize = 400;
const LABEL_FRACTION: f64 = 0.1;
const OVERFIT_SAMPLES: usize = 10;
const OVERFIT_STEPS: usize = 500;

#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn expect(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(msg());
        }
    }

    fn note(&mut self, msg: String) {
        self.notes.push(msg);
    }
}

/// Results shared between the learning criteria.
#[derive(Default)]
struct Shared {
    pretrained: Vec<(u64, Checkpoint)>,
    pretrain_secs: f64,
    reports: Vec<MetricsReport>,
}

fn digits() -> Charset {
    Charset::new("0123456789".chars()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

fn log_softmax_rows(t: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, k], data)
}

fn all_strings(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for c in 0..alphabet {
                let mut n: Vec<usize> = s.clone();
                n.push(c);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

fn criterion_1(c: &mut Checks, _: &mut Shared) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut compared, mut worst) = (0usize, 0.0f64);
    for alphabet in 1..=3usize {
        let blank = alphabet;
        let k = alphabet + 1;
        for t in 1..=6usize {
            for _draw in 0..3 {
                let logp = log_softmax_rows(t, k, &mut rng);
                // every path, summed by its collapsed label
                let mut mass: HashMap<Vec<usize>, f64> = HashMap::new();
                let mut path = vec![0usize; t];
                for code in 0..k.pow(t as u32) {
                    let mut x = code;
                    let mut lp = 0.0;
                    for (i, p) in path.iter_mut().enumerate() {
                        *p = x % k;
                        x /= k;
                        lp += logp.data()[i * k + *p];
                    }
                    *mass.entry(ctc_collapse(&path, blank)).or_insert(0.0) += lp.exp();
                }
                for target in all_strings(alphabet, t) {
                    let dp = ctc_loss(&logp, &target, blank);
                    compared += 1;
                    match mass.get(&target) {
                        Some(&p) => {
                            let err = (dp - (-p.ln())).abs();
                            worst = worst.max(err);
                            c.expect(err <= CTC_TOL, || {
                                format!("A={alphabet} T={t} target {target:?}: dp {dp} vs brute {}", -p.ln())
                            });
                        }
                        None => c.expect(dp == f64::INFINITY, || {
                            format!("A={alphabet} T={t} target {target:?} unreachable but loss {dp}")
                        }),
                    }
                }
            }
        }
    }
    let ids = |s: &str| -> Vec<usize> {
        s.chars()
            .map(|ch| match ch {
                'a' => 0,
                'b' => 1,
                'c' => 2,
                _ => 3,
            })
            .collect()
    };
    let collapsed = ctc_collapse(&ids("aa-a-bbb-cc-ccc--"), 3);
    c.expect(collapsed == ids("aabcc"), || format!("collapse example gave {collapsed:?}"));

    let half = Tensor::new(vec![2, 2], vec![0.5f64.ln(); 4]);
    let l = ctc_loss(&half, &[0], 1);
    c.expect((l - (-(0.75f64).ln())).abs() <= CTC_TOL, || format!("two-frame example gave {l}"));
    c.note(format!("{compared} targets compared, worst |dp - brute| {worst:.1e}"));
}

// ---------------------------------------------------------------- 2

fn scalar_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Straight sum over the 2M anchors with explicit exponentials.
fn scalar_nce(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> f64 {
    let m = za.len();
    let pool: Vec<&Vec<f64>> = za.iter().chain(zb).collect();
    let mut total = 0.0;
    for i in 0..2 * m {
        let pos = if i < m { i + m } else { i - m };
        let num = (scalar_cos(pool[i], pool[pos]) / tau).exp();
        let den: f64 = (0..2 * m)
            .filter(|&u| u != i)
            .map(|u| (scalar_cos(pool[i], pool[u]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total
}

fn to_set(rows: &[Vec<f64>], side: Side) -> InstanceSet {
    InstanceSet {
        instances: rows
            .iter()
            .enumerate()
            .map(|(i, v)| Instance {
                vector: v.clone(),
                image_index: i,
                instance_index: 0,
            })
            .collect(),
        side,
    }
}

fn var_loss(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> f64 {
    let g = Graph::new();
    let t = |rows: &[Vec<f64>]| Tensor::new(vec![rows.len(), rows[0].len()], rows.concat());
    contrastive_loss_var(g.constant(t(za)), g.constant(t(zb)), tau).unwrap().item()
}

fn criterion_2(c: &mut Checks, _: &mut Shared) {
    let za = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let zb = za.clone();
    let oracle = scalar_nce(&za, &zb, 1.0);
    let closed = 4.0 * ((2.0 + std::f64::consts::E).ln() - 1.0);
    let got = contrastive_loss(&to_set(&za, Side::A), &to_set(&zb, Side::B), 1.0).unwrap();
    let got_var = var_loss(&za, &zb, 1.0);
    for (name, v) in [("scalar oracle", oracle), ("contrastive_loss", got), ("contrastive_loss_var", got_var)] {
        c.expect((v - closed).abs() <= NCE_TOL, || format!("2x2 {name} = {v}, closed form {closed}"));
    }
    c.note(format!(
        "2x2 total {got:.7} (closed form {closed:.7}; quoted {NCE_QUOTED} is 4 x the rounded term, off by {:.1e})",
        (got - NCE_QUOTED).abs()
    ));
    // the quoted figure holds to its own rounding
    c.expect((got - NCE_QUOTED).abs() < 4.0 * 0.5e-4, || format!("2x2 total {got} vs quoted {NCE_QUOTED}"));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in 1..=6usize {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows = vec![v; m];
        let total = contrastive_loss(&to_set(&rows, Side::A), &to_set(&rows, Side::B), 0.5).unwrap();
        let per_term = total / (2 * m) as f64;
        c.expect((per_term - chance_level(m)).abs() <= CHANCE_TOL, || {
            format!("M={m}: identical instances give {per_term}, chance {}", chance_level(m))
        });
    }

    for _ in 0..5 {
        let m = rng.random_range(2..5);
        let d = rng.random_range(2..6);
        let a: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let want = scalar_nce(&a, &b, 0.5);
        let got = contrastive_loss(&to_set(&a, Side::A), &to_set(&b, Side::B), 0.5).unwrap();
        let got_var = var_loss(&a, &b, 0.5);
        c.expect((got - want).abs() <= NCE_TOL && (got_var - want).abs() <= NCE_TOL, || {
            format!("random M={m} D={d}: oracle {want}, scalar {got}, graph {got_var}")
        });
    }

    let mut worst: f64 = 0.0;
    for (m, d) in [(2, 2), (3, 4), (2, 8), (4, 8)] {
        for tau in [0.5, 0.1] {
            let inputs = [random_tensor(&[m, d], &mut rng), random_tensor(&[m, d], &mut rng)];
            let err = max_rel_error(&inputs, |_, v: &[Var]| contrastive_loss_var(v[0], v[1], tau).unwrap(), 1e-6);
            worst = worst.max(err);
            c.expect(err <= GRAD_TOL, || format!("gradient M={m} D={d} tau={tau}: rel error {err:.2e}"));
        }
    }
    // through the window mapping too
    let frames = random_tensor(&[2, 7, 3], &mut rng);
    let frames_b = random_tensor(&[2, 7, 3], &mut rng);
    let err = max_rel_error(
        &[frames, frames_b],
        |_, v: &[Var]| {
            let w = MappingChoice::WindowToInstance { windows: 3 };
            let a = map_instances_var(v[0], w).unwrap();
            let b = map_instances_var(v[1], w).unwrap();
            contrastive_loss_var(a, b, 0.5).unwrap()
        },
        1e-6,
    );
    worst = worst.max(err);
    c.expect(err <= GRAD_TOL, || format!("gradient through window mapping: rel error {err:.2e}"));
    c.note(format!("worst gradient rel error {worst:.1e}"));
}

// ---------------------------------------------------------------- 3

fn bits(rows: &[Vec<f64>]) -> Vec<u64> {
    rows.iter().flatten().map(|x| x.to_bits()).collect()
}

fn var_instances(frames: &Tensor, choice: MappingChoice) -> Vec<u64> {
    let g = Graph::new();
    map_instances_var(g.constant(frames.clone()), choice)
        .unwrap()
        .value()
        .data()
        .iter()
        .map(|x| x.to_bits())
        .collect()
}

fn criterion_3(c: &mut Checks, _: &mut Shared) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let maps: Vec<Tensor> = (0..n).map(|_| random_tensor(&[26, 3], &mut rng)).collect();
    for (choice, want) in [
        (MappingChoice::AllToInstance, n),
        (MappingChoice::WholeMapFlatten, n),
        (MappingChoice::WindowToInstance { windows: 5 }, n * 5),
        (MappingChoice::FrameToInstance, n * 26),
    ] {
        let (a, b) = assemble_sets(&maps, &maps, choice).unwrap();
        c.expect(a.len() == want && b.len() == want, || format!("{choice:?}: |Z| = {} not {want}", a.len()));
    }
    let varied: Vec<Tensor> = [9, 13, 26, 4].iter().map(|&t| random_tensor(&[t, 3], &mut rng)).collect();
    let (a, _) = assemble_sets(&varied, &varied, MappingChoice::FrameToInstance).unwrap();
    c.expect(a.len() == 52, || format!("frame mapping over varied lengths gave {}", a.len()));

    let mut pairs = 0;
    for t in 1..=32usize {
        let frames = random_tensor(&[t, 3], &mut rng);
        let batch = frames.clone().reshape(&[1, t, 3]);
        let w1 = MappingChoice::WindowToInstance { windows: 1 };
        let wt = MappingChoice::WindowToInstance { windows: t };
        c.expect(
            bits(&map_instances(&frames, w1).unwrap()) == bits(&map_instances(&frames, MappingChoice::AllToInstance).unwrap()),
            || format!("T={t}: window(1) differs from all-to-instance"),
        );
        c.expect(
            bits(&map_instances(&frames, wt).unwrap()) == bits(&map_instances(&frames, MappingChoice::FrameToInstance).unwrap()),
            || format!("T={t}: window(T) differs from frame-to-instance"),
        );
        c.expect(
            var_instances(&batch, w1) == var_instances(&batch, MappingChoice::AllToInstance),
            || format!("T={t}: batched window(1) differs from all-to-instance"),
        );
        c.expect(
            var_instances(&batch, wt) == var_instances(&batch, MappingChoice::FrameToInstance),
            || format!("T={t}: batched window(T) differs from frame-to-instance"),
        );
        for windows in 1..=t {
            pairs += 1;
            // frame i belongs to window j iff [i, i+1) meets [jT/T', (j+1)T/T')
            let members: Vec<Vec<usize>> = (0..windows)
                .map(|j| (0..t).filter(|&i| i * windows < (j + 1) * t && (i + 1) * windows > j * t).collect())
                .collect();
            let bounds = window_bounds(t, windows);
            for (j, m) in members.iter().enumerate() {
                let (s, e) = bounds[j];
                c.expect(m.first() == Some(&s) && m.last() == Some(&(e - 1)) && m.len() == e - s, || {
                    format!("T={t} T'={windows} window {j}: bounds {:?} vs oracle {m:?}", (s, e))
                });
            }
            let pooled = map_instances(&frames, MappingChoice::WindowToInstance { windows }).unwrap();
            let g = Graph::new();
            let batched = map_instances_var(g.constant(batch.clone()), MappingChoice::WindowToInstance { windows })
                .unwrap()
                .value();
            for (j, m) in members.iter().enumerate() {
                for f in 0..3 {
                    let want = m.iter().map(|&i| frames.data()[i * 3 + f]).sum::<f64>() / m.len() as f64;
                    c.expect((pooled[j][f] - want).abs() < 1e-12, || format!("T={t} T'={windows}: pooled mean off"));
                    c.expect((batched.data()[j * 3 + f] - want).abs() < 1e-12, || {
                        format!("T={t} T'={windows}: batched pooled mean off")
                    });
                }
            }
        }
    }
    c.note(format!("{pairs} (T, T') pairs against the overlap oracle"));
}

// ---------------------------------------------------------------- 4

fn sample_image(rng: &mut impl Rng) -> TextImage {
    let (h, w) = (32, 100);
    TextImage::new(1, h, w, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect())
}

fn criterion_4(c: &mut Checks, _: &mut Shared) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = sample_image(&mut rng);
    for op in [
        BoundOp::LinearContrast { alpha: 1.0 },
        BoundOp::CropVertical { top: 0.0, bottom: 0.0 },
        BoundOp::CropHorizontal { left: 0.0, right: 0.0 },
    ] {
        let out = apply_op(&img, &op);
        c.expect(out.pixels() == img.pixels(), || format!("{op:?} is not the identity"));
    }

    let spec = PipelineSpec::default();
    let within = |v: f64, lo: f64, hi: f64| (lo..=hi).contains(&v);
    let mut counts = [0usize; 6];
    for i in 0..AUG_DRAWS {
        let ops = sample_pipeline(&spec, &mut view_rng(99, i, 0));
        c.expect((1..=5).contains(&ops.len()), || format!("draw {i}: {} ops", ops.len()));
        counts[ops.len().min(5)] += 1;
        let kinds: HashSet<OpKind> = ops.iter().map(BoundOp::kind).collect();
        c.expect(kinds.len() == ops.len(), || format!("draw {i}: repeated op"));
        for op in &ops {
            let ok = match *op {
                BoundOp::LinearContrast { alpha } => within(alpha, 0.5, 1.0),
                BoundOp::GaussianBlur { sigma } => within(sigma, 0.5, 1.5),
                BoundOp::Sharpen { alpha, lightness } => within(alpha, 0.0, 0.5) && within(lightness, 0.0, 0.5),
                BoundOp::CropVertical { top, bottom } => within(top, 0.0, 0.4) && within(bottom, 0.0, 0.4),
                BoundOp::CropHorizontal { left, right } => within(left, 0.0, 0.02) && within(right, 0.0, 0.02),
                BoundOp::Perspective { sigma, .. } => within(sigma, 0.01, 0.02),
                BoundOp::PiecewiseAffine { sigma, .. } => within(sigma, 0.02, 0.03),
            };
            c.expect(ok, || format!("draw {i}: {op:?} out of range"));
        }
    }

    let small = TextImage::new(1, 16, 40, (0..640).map(|_| rng.random_range(0.0..=1.0)).collect());
    for seed in 0..20u64 {
        let a = augment_pair(&small, seed, 3);
        let b = augment_pair(&small, seed, 3);
        c.expect(a.view_a.pixels() == b.view_a.pixels() && a.view_b.pixels() == b.view_b.pixels(), || {
            format!("seed {seed}: views differ between runs")
        });
    }
    let differ = (0..20u64)
        .filter(|&s| augment_pair(&small, s, 3).view_a.pixels() != augment_pair(&small, s + 100, 3).view_a.pixels())
        .count();
    c.expect(differ >= 15, || format!("only {differ}/20 seed changes altered the view"));

    let names: Vec<String> = spec
        .ops
        .iter()
        .map(|op| serde_json::to_string(&op.kind()).unwrap().to_lowercase())
        .collect();
    c.expect(
        names.iter().all(|n| !n.contains("flip") && !n.contains("rot") && !n.contains("mirror")),
        || format!("inventory {names:?}"),
    );
    c.note(format!("{AUG_DRAWS} draws, ops per view {:?}", &counts[1..]));
}

// ---------------------------------------------------------------- 5

fn small_corpus(n: usize, seed: u64) -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = RenderSpec::new(n, seed);
    spec.charset = digits();
    spec.length_range = (3, 5);
    let m = render_synthetic(dir.path(), &spec).unwrap();
    (dir, m)
}

fn criterion_5(c: &mut Checks, _: &mut Shared) {
    let (_dir, m) = small_corpus(16, 5);
    let mut cfg = ExperimentConfig::desk();
    cfg.charset = digits();
    cfg.protocol.iterations = 4;
    cfg.protocol.batch_size = 8;
    cfg.protocol.eval_every = 2;
    let images = Dataset::load_unlabeled(&m, 1).unwrap();
    let labeled = Dataset::load(&m, &cfg.charset, 1).unwrap();

    for head in [ProjectionHead::None, ProjectionHead::MlpPerFrame, ProjectionHead::Bilstm] {
        let mut cfg = cfg.clone();
        cfg.encoder.projection_head = head;
        cfg.encoder.projected_width = 8;
        let ck = pretrain(&cfg, &images, None, None).unwrap().checkpoint;
        let frozen: Vec<(String, Vec<u64>)> = ck
            .params
            .params()
            .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
            .collect();
        for decoder in [DecoderConfig::Ctc, DecoderConfig::Attention { hidden: 8, max_len: 6 }] {
            let mut dc = cfg.for_phase(Phase::DecoderEval);
            dc.decoder = decoder;
            let out = decoder_eval(&dc, &ck, &labeled, None).unwrap();
            for (name, want) in &frozen {
                let got: Vec<u64> = out.checkpoint.params.get(name).unwrap().data().iter().map(|x| x.to_bits()).collect();
                c.expect(&got == want, || format!("{head:?}/{}: {name} changed", decoder.name()));
            }
            c.expect(out.report.encoder_digest_before == out.report.encoder_digest_after, || {
                "digest changed".into()
            });
            check_no_projection(c, &dc, &out.checkpoint.params, &images);
        }
        let fc = cfg.for_phase(Phase::Finetune);
        let out = finetune(&fc, Some(&ck), &m, &labeled, None).unwrap();
        check_no_projection(c, &fc, &out.checkpoint.params, &images);
    }

    let entries = (0..1000).map(|i| (format!("{i}.png").into(), format!("w{i}"))).collect();
    let big = Manifest::from_entries("/nowhere", entries);
    for seed in 0..100u64 {
        let five: HashSet<usize> = subset_labels(&big, 0.05, seed).unwrap().record.indices.into_iter().collect();
        let ten: HashSet<usize> = subset_labels(&big, 0.10, seed).unwrap().record.indices.into_iter().collect();
        c.expect(five.len() == 50 && ten.len() == 100 && five.is_subset(&ten), || {
            format!("seed {seed}: 5% subset not nested in 10%")
        });
    }
    c.note("3 heads x (2 decoder evals + finetune), 100 subset seeds".into());
}

fn check_no_projection(c: &mut Checks, cfg: &ExperimentConfig, params: &ParamStore, data: &Dataset) {
    c.expect(!params.names().any(|n| n.starts_with(PROJECTION_PREFIX)), || {
        "projection weights survived into a supervised checkpoint".into()
    });
    let g = Graph::new();
    let fw = Forward::inference(&g, params);
    let x = g.constant(seqclr::data::stack((0..2).map(|i| data.image(i))));
    let feats = seqclr::encoder::encode(&fw, &cfg.encoder, x).unwrap();
    let _ = seqclr::decoders::decoder_loss(&fw, &cfg.decoder, cfg.charset.len(), feats, &[vec![1, 2, 3], vec![4, 4]]);
    let names = g.param_names();
    c.expect(!names.iter().any(|n| n.starts_with(PROJECTION_PREFIX)), || {
        format!("projection parameter in evaluation graph: {names:?}")
    });
}

// ---------------------------------------------------------------- 6 and 7

struct DeskCorpus {
    _dir: tempfile::TempDir,
    train: Manifest,
    images: Dataset,
    labeled: Dataset,
    test: Dataset,
}

fn desk_corpus() -> DeskCorpus {
    let dir = tempfile::tempdir().unwrap();
    let render = |sub: &str, n: usize, seed: u64| {
        let mut spec = RenderSpec::new(n, seed);
        spec.charset = digits();
        spec.length_range = (3, 5);
        render_synthetic(&dir.path().join(sub), &spec).unwrap()
    };
    let train = render("train", CORPUS, 1);
    let test = render("test", TEST_CORPUS, 999);
    let images = Dataset::load_unlabeled(&train, 1).unwrap();
    let labeled = Dataset::load(&train, &digits(), 1).unwrap();
    let test = Dataset::load(&test, &digits(), 1).unwrap();
    DeskCorpus {
        _dir: dir,
        train,
        images,
        labeled,
        test,
    }
}

fn desk_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.charset = digits();
    cfg.seed = seed;
    cfg.protocol.iterations = PRETRAIN_STEPS;
    cfg
}

thread_local! {
    static CORPUS_CACHE: std::cell::RefCell<Option<std::rc::Rc<DeskCorpus>>> = const { std::cell::RefCell::new(None) };
}

fn corpus() -> std::rc::Rc<DeskCorpus> {
    CORPUS_CACHE.with(|c| c.borrow_mut().get_or_insert_with(|| std::rc::Rc::new(desk_corpus())).clone())
}

fn criterion_6(c: &mut Checks, shared: &mut Shared) {
    let data = corpus();
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let cfg = desk_config(seed);
        let out = pretrain(&cfg, &data.images, None, None).unwrap();
        let chance = out.log.chance_level.unwrap();
        let last = out.log.final_loss(10).unwrap();
        ratios.push(last / chance);
        c.expect(last < 0.5 * chance, || {
            format!("seed {seed}: final loss {last:.3} not below half of chance {chance:.3}")
        });
        c.note(format!("seed {seed}: loss {last:.3} / chance {chance:.3}"));
        shared.pretrained.push((seed, out.checkpoint));
    }
    shared.pretrain_secs = start.elapsed().as_secs_f64();

    let decoders = [
        DecoderConfig::Ctc,
        DecoderConfig::Attention {
            hidden: 64,
            max_len: 10,
        },
    ];
    for decoder in decoders {
        let (mut pre, mut rnd) = (Vec::new(), Vec::new());
        for (seed, ck) in &shared.pretrained {
            let mut dc = desk_config(*seed).for_phase(Phase::DecoderEval);
            dc.decoder = decoder;
            dc.protocol.iterations = DECODER_EVAL_STEPS;
            dc.protocol.augment = false;
            let random = Checkpoint::untrained(&dc.encoder, *seed).unwrap();
            let a = decoder_eval(&dc, ck, &data.labeled, Some(&data.test)).unwrap();
            let b = decoder_eval(&dc, &random, &data.labeled, Some(&data.test)).unwrap();
            pre.push(a.report.metrics.acc);
            rnd.push(b.report.metrics.acc);
            shared.reports.push(a.report.metrics);
            shared.reports.push(b.report.metrics);
        }
        let (mp, mr) = (median(pre.clone()), median(rnd.clone()));
        c.expect(mp > mr, || {
            format!("{}: median acc pretrained {mp:.3} not above random {mr:.3}", decoder.name())
        });
        c.note(format!("{} acc pretrained {pre:.3?} vs random {rnd:.3?}", decoder.name()));
    }
}

fn criterion_7(c: &mut Checks, shared: &mut Shared) -> f64 {
    let data = corpus();
    c.expect(shared.pretrained.len() == SEEDS.len(), || "pretrained encoders missing".into());
    let (mut pre, mut scratch) = (Vec::new(), Vec::new());
    for (seed, ck) in &shared.pretrained {
        let mut fc = desk_config(*seed).for_phase(Phase::Finetune);
        fc.protocol.label_fraction = LABEL_FRACTION;
        fc.protocol.iterations = FINETUNE_STEPS;
        fc.protocol.augment = true;
        let a = finetune(&fc, Some(ck), &data.train, &data.labeled, Some(&data.test)).unwrap();
        let b = finetune(&fc, None, &data.train, &data.labeled, Some(&data.test)).unwrap();
        c.expect(a.subset.as_ref().map(|s| &s.digest) == b.subset.as_ref().map(|s| &s.digest), || {
            format!("seed {seed}: runs drew different label subsets")
        });
        pre.push(a.report.metrics.acc);
        scratch.push(b.report.metrics.acc);
        shared.reports.push(a.report.metrics);
        shared.reports.push(b.report.metrics);
    }
    let (mp, ms) = (median(pre.clone()), median(scratch.clone()));
    c.expect(mp >= ms, || format!("median acc pretrained {mp:.3} below scratch {ms:.3}"));
    c.note(format!("acc at {LABEL_FRACTION} labels: pretrained {pre:.3?} vs scratch {scratch:.3?}"));
    shared.pretrain_secs
}

// ---------------------------------------------------------------- 8

fn random_word(rng: &mut impl Rng) -> String {
    let len = rng.random_range(0..10);
    (0..len).map(|_| ['a', 'b', 'c', 'd'][rng.random_range(0..4)]).collect()
}

fn criterion_8(c: &mut Checks, shared: &mut Shared) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..METRIC_PAIRS {
        let (a, b, x) = (random_word(&mut rng), random_word(&mut rng), random_word(&mut rng));
        let ab = edit_distance(&a, &b);
        c.expect(edit_distance(&a, &a) == 0, || format!("d({a:?}, {a:?}) != 0"));
        c.expect((ab == 0) == (a == b), || format!("d({a:?}, {b:?}) = {ab}"));
        c.expect(ab == edit_distance(&b, &a), || format!("asymmetric on {a:?}, {b:?}"));
        c.expect(ab <= edit_distance(&a, &x) + edit_distance(&x, &b), || {
            format!("triangle fails for {a:?}, {b:?} via {x:?}")
        });
    }
    let r = evaluate(&["hallo".into(), "xyz".into()], &["hello".into(), "abc".into()], false).unwrap();
    c.expect(r.cer == 0.5 && r.acc == 0.0 && r.ed1 == 0.5, || format!("hand example gave {r:?}"));
    shared.reports.push(r);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let refs: Vec<String> = (0..n).map(|_| random_word(&mut rng)).collect();
        let preds: Vec<String> = refs
            .iter()
            .map(|w| if rng.random_bool(0.5) { w.clone() } else { random_word(&mut rng) })
            .collect();
        shared.reports.push(evaluate(&preds, &refs, false).unwrap());
    }
    let bad = shared.reports.iter().filter(|r| r.acc > r.ed1).count();
    c.expect(bad == 0, || format!("{bad} reports with acc > ed1"));
    c.note(format!("{METRIC_PAIRS} pairs; acc <= ed1 on {} reports", shared.reports.len()));
}

// ---------------------------------------------------------------- 9

const DIMS: AttentionDims = AttentionDims {
    symbols: 3,
    feature: 4,
    hidden: 5,
};

fn criterion_9(c: &mut Checks, shared: &mut Shared) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    attention::init(&mut store, "head.att", DIMS, &mut rng);
    let feats = random_tensor(&[2, 6, 4], &mut rng);

    let g = Graph::new();
    let fw = Forward::inference(&g, &store);
    let ctx = attention::context(&fw, "head.att", g.constant(feats.clone()));
    let zero = g.constant(Tensor::zeros(&[2, DIMS.hidden]));
    let mut state = (zero, zero);
    let mut prev = vec![DIMS.start(); 2];
    for step in 0..6 {
        let (logits, alpha, next) = attention::step(&fw, "head.att", DIMS, &ctx, state, &prev);
        state = next;
        for row in alpha.value().data().chunks(6) {
            let s: f64 = row.iter().sum();
            c.expect((s - 1.0).abs() <= DIST_TOL && row.iter().all(|&a| a >= 0.0), || {
                format!("step {step}: attention weights sum to {s}")
            });
        }
        for row in logits.softmax().value().data().chunks(DIMS.classes()) {
            let s: f64 = row.iter().sum();
            c.expect((s - 1.0).abs() <= DIST_TOL, || format!("step {step}: output distribution sums to {s}"));
        }
        prev = vec![step % DIMS.symbols, DIMS.eow()];
    }

    let targets = [vec![0, 2], vec![1]];
    let eval = |store: &ParamStore, feats: &Tensor| {
        let g = Graph::new();
        let fw = Forward::inference(&g, store);
        attention::loss(&fw, "head.att", DIMS, g.constant(feats.clone()), &targets).item()
    };
    let g = Graph::new();
    let fw = Forward::new(&g, &store, Trainable::All, true);
    let x = g.leaf(feats.clone());
    let grads = g.backward(attention::loss(&fw, "head.att", DIMS, x, &targets));
    let named = grads.named();
    let h = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
    let mut worst: f64 = 0.0;
    let gx = grads.get(x).unwrap();
    for i in 0..feats.numel() {
        let (mut p, mut m) = (feats.clone(), feats.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        worst = worst.max(rel(gx.data()[i], (eval(&store, &p) - eval(&store, &m)) / (2.0 * h)));
    }
    for name in store.names() {
        let analytic = &named[name];
        for i in 0..analytic.numel() {
            let (mut p, mut m) = (store.clone(), store.clone());
            p.get_mut(name).unwrap().data_mut()[i] += h;
            m.get_mut(name).unwrap().data_mut()[i] -= h;
            worst = worst.max(rel(analytic.data()[i], (eval(&p, &feats) - eval(&m, &feats)) / (2.0 * h)));
        }
    }
    c.expect(worst <= GRAD_TOL, || format!("attention loss gradient rel error {worst:.2e}"));

    let dir = tempfile::tempdir().unwrap();
    let mut spec = RenderSpec::new(OVERFIT_SAMPLES, 5);
    spec.length_range = (3, 6);
    let m = render_synthetic(dir.path(), &spec).unwrap();
    let mut cfg = ExperimentConfig::desk();
    cfg.decoder = DecoderConfig::Attention {
        hidden: 64,
        max_len: 10,
    };
    cfg.protocol = ProtocolSpec {
        iterations: OVERFIT_STEPS,
        batch_size: OVERFIT_SAMPLES,
        validation_fraction: 0.0,
        augment: false,
        ..ProtocolSpec::finetune(1.0)
    };
    let data = Dataset::load(&m, &cfg.charset, 1).unwrap();
    let out = finetune(&cfg, None, &m, &data, None).unwrap();
    let acc = out.report.metrics.acc;
    c.expect(out.report.evaluated_on == "train" && acc == 1.0, || {
        format!("overfit reached {acc} on {}", out.report.evaluated_on)
    });
    shared.reports.push(out.report.metrics);
    c.note(format!("gradient rel error {worst:.1e}; overfit train acc {acc} after {OVERFIT_STEPS} steps"));
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [(&str, fn(&mut Checks, &mut Shared)); 9] = [
        ("CTC oracle equivalence", criterion_1),
        ("NCE correctness", criterion_2),
        ("mapping laws", criterion_3),
        ("augmentation contract", criterion_4),
        ("protocol contracts", criterion_5),
        ("desk-scale learning signal", criterion_6),
        ("desk-scale semi-supervised trend", |c, s| {
            // time spent pretraining the shared encoders counts here too
            let extra = criterion_7(c, s);
            c.note(format!("includes {extra:.0} s of shared pretraining"));
        }),
        ("metric kernel", criterion_8),
        ("attention correctness", criterion_9),
    ];
    let mut shared = Shared::default();
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let mut checks = Checks::default();
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run(&mut checks, &mut shared)));
        let mut secs = start.elapsed().as_secs_f64();
        if n == 7 {
            secs += shared.pretrain_secs;
        }
        if let Err(e) = result {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            checks.failures.push(format!("panicked: {msg}"));
        }
        if secs >= LIMITS[i] {
            checks.failures.push(format!("took {secs:.1} s, limit {} s", LIMITS[i]));
        }
        let status = if checks.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut line = format!("criterion {n} ({name}): {status} in {secs:.1} s (limit {} s)", LIMITS[i]);
        for note in &checks.notes {
            line.push_str(&format!("\n    {note}"));
        }
        for f in checks.failures.iter().take(10) {
            line.push_str(&format!("\n    failure: {f}"));
        }
        if checks.failures.len() > 10 {
            line.push_str(&format!("\n    ... {} more failures", checks.failures.len() - 10));
        }
        println!("{line}");
        lines.push(line);
        if !checks.failures.is_empty() {
            failed.push(n);
        }
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("{}", l.lines().next().unwrap());
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
