//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tokvox_core::codec::distill::{cosine_distance, cosine_distance_value, distill_loss, COSINE_EPS};
use tokvox_core::codec::losses::{disc_loss_value, gen_adv_loss_value};
use tokvox_core::codec::model::latents_to_rows;
use tokvox_core::codec::quant::{kmeans, quantize_on_tape, rvq_encode};
use tokvox_core::codec::train::{Clip, CodecTrainConfig, CodecTrainer};
use tokvox_core::codec::{bitrate, frame_rate, CodeGrid, CodecConfig, CodecModel, DiscConfig, DistillTarget, LossWeights, MelLossConfig};
use tokvox_core::eval::snr_db;
use tokvox_core::gradsuite;
use tokvox_core::lm::{
    factorized_nll, generate, ByteTokenizer, DualLm, LmConfig, LmExample, LmTrainConfig, LmTrainer, PlainStepper,
    SamplingConfig, SemanticStepper, Tokenizer,
};
use tokvox_core::lm::generate::prompt_input;
use tokvox_core::mapi::{AggregationHead, MapiStepper, StreamMaskPlan};
use tokvox_core::synth::{synth_dataset, SynthSpec};
use tokvox_core::{Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

fn random_grid(k: usize, len: usize, cs: usize, rng: &mut ChaCha8Rng) -> CodeGrid {
    CodeGrid::new(k, len, cs, (0..k * len).map(|_| rng.random_range(0..cs as u32)).collect()).unwrap()
}

fn small_lm() -> LmConfig {
    LmConfig {
        text_vocab: 32,
        n_codebooks: 4,
        codebook_size: 16,
        semantic_layers: 2,
        semantic_dim: 16,
        semantic_heads: 2,
        acoustic_layers: 2,
        acoustic_dim: 16,
        acoustic_heads: 2,
        mlp_ratio: 2,
        max_seq_len: 64,
        rope_base: 10000.0,
    }
}

fn bitrates() -> Outcome {
    let rows = [
        ("codec-12.5Hz", bitrate(8, 4096, 12.5), 1200.0),
        ("encodec", bitrate(8, 1024, 75.0), 6000.0),
        ("bigcodec", bitrate(1, 8192, 80.0), 1040.0),
        ("frame-rate", frame_rate(24000.0, &[2, 4, 5, 6, 8]), 12.5),
    ];
    let pass = rows.iter().all(|(_, got, want)| got == want);
    let detail = rows.iter().map(|(n, g, _)| format!("{n}={g}")).collect::<Vec<_>>().join(" ");
    outcome(pass, detail)
}

fn gradient_suites() -> Outcome {
    let results = match gradsuite::run_all(&gradsuite::default_config()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let kinks: usize = results.iter().map(|r| r.kinks).sum();
    let detail = format!(
        "{} suites, worst rel error {worst:.2e}, {kinks} kink coords skipped{}",
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
    );
    outcome(failed.is_empty(), detail)
}

fn factorization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for b in 0..50u64 {
        let lm = DualLm::<f64>::new(small_lm(), b).unwrap();
        let batch: Vec<LmExample> = (0..3)
            .map(|_| {
                let tl = rng.random_range(1..6);
                let fl = rng.random_range(1..9);
                LmExample { text: (0..tl).map(|_| rng.random_range(0..32)).collect(), codes: random_grid(4, fl, 16, &mut rng) }
            })
            .collect();
        let (mut eq8, mut parts) = (0.0, 0.0);
        for ex in &batch {
            let mut t = Tape::new();
            let p = lm.params.bind(&mut t, false);
            let l = lm.loss(&mut t, &p, ex).unwrap();
            let logits: Vec<Tensor<f64>> = l.logits.iter().map(|&v| t.value(v).clone()).collect();
            eq8 += factorized_nll(t.value(l.pred), t.value(l.target), &logits, &l.targets);
            parts += t.scalar(l.ctx) + t.scalar(l.acoustic);
        }
        worst = worst.max((eq8 - parts).abs() / batch.len() as f64);
    }
    outcome(worst < 1e-6, format!("50 batches, max |joint NLL - (ctx + acoustic)| = {worst:.2e}"))
}

fn split_rvq() -> Outcome {
    // distillation gradients never reach the acoustic codebooks
    let mut zero = true;
    let mut semantic_nonzero = true;
    for target in [DistillTarget::Quantized, DistillTarget::PreQuantized] {
        let cfg = CodecConfig { distill_target: target, ..CodecConfig::tiny() };
        let m = CodecModel::<f64>::new(cfg, 3).unwrap();
        let spec = SynthSpec { count: 1, ..Default::default() };
        let u = &synth_dataset(&spec).unwrap()[0];
        let wave: Vec<f64> = u.wave.iter().map(|&v| v as f64).collect();
        let te = tokvox_core::codec::distill::TeacherEmbeddings::new(u.teacher.frames.cast(), u.teacher.frame_rate).unwrap();
        let mut t = Tape::new();
        let p = m.params.bind(&mut t, true);
        let x = t.constant(Tensor::new(vec![1, 1, wave.len()], wave).unwrap());
        let z = m.encoder.forward(&mut t, &p, x);
        let rows = latents_to_rows(&mut t, z);
        let tables: Vec<_> = m.quant.ids().map(|id| p.var(id)).collect();
        let q = quantize_on_tape(&mut t, &m.stack(), &tables, rows).unwrap();
        let c0 = if target == DistillTarget::Quantized { q.semantic } else { rows };
        let loss = distill_loss(&mut t, &p, &m.proj, c0, &te).unwrap();
        let g = t.backward(loss);
        let grads = p.grads(&g);
        for id in &m.quant.acoustic {
            if let Some(gr) = &grads[id.index()] {
                zero &= gr.data().iter().all(|&v| v == 0.0);
            }
        }
        let enc_grad = m
            .params
            .ids()
            .filter(|id| m.params.name(*id).starts_with("enc"))
            .any(|id| grads[id.index()].as_ref().is_some_and(|gr| gr.data().iter().any(|&v| v != 0.0)));
        semantic_nonzero &= enc_grad;
    }
    // residual energy is non-increasing across k-means-trained levels
    let mut monotone = true;
    let mut energies = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = normal(3, 8, &mut rng).map(|v| 4.0 * v);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let data: Vec<f64> =
            (0..1000).flat_map(|i| centers.row(i % 3).to_vec()).map(|m| m + noise.sample(&mut rng)).collect();
        let x = Tensor::new(vec![1000, 8], data).unwrap();
        let mut levels = Vec::new();
        let mut r = x.clone();
        for _ in 0..4 {
            let cb = kmeans(&r, 16, 20, &mut rng);
            r = rvq_encode(std::slice::from_ref(&cb), &r).unwrap().residuals[0].clone();
            levels.push(cb);
        }
        let out = rvq_encode(&levels, &x).unwrap();
        let ms = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        let mut e = vec![ms(&x)];
        e.extend(out.residuals.iter().map(ms));
        monotone &= e.windows(2).all(|w| w[1] <= w[0]);
        energies.push(e);
    }
    let e0 = &energies[0];
    outcome(
        zero && semantic_nonzero && monotone,
        format!(
            "acoustic distill grads all zero: {zero}, encoder receives distill grad: {semantic_nonzero}, \
             residual MSE non-increasing on 5 seeds: {monotone} (seed 0: {})",
            e0.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ")
        ),
    )
}

fn hinge_tables() -> Outcome {
    let s = |v: &[f64]| v.iter().map(|&x| Tensor::<f64>::vector(vec![x])).collect::<Vec<_>>();
    let cases = [
        ("D all: fake -2, real +2", disc_loss_value(&s(&[2.0, 2.0]), &s(&[-2.0, -2.0])), 0.0),
        ("D all zero", disc_loss_value(&s(&[0.0, 0.0]), &s(&[0.0, 0.0])), 2.0),
        ("D K=2 (-1,+1),(0,0)", disc_loss_value(&s(&[1.0, 0.0]), &s(&[-1.0, 0.0])), 1.0),
        ("G fake 1", gen_adv_loss_value(&s(&[1.0, 1.0])), 0.0),
        ("G fake 0", gen_adv_loss_value(&s(&[0.0, 0.0])), 1.0),
        ("G fake -1", gen_adv_loss_value(&s(&[-1.0])), 2.0),
    ];
    let pass = cases.iter().all(|(_, g, w)| g == w);
    outcome(pass, cases.iter().map(|(n, g, _)| format!("[{n}]={g}")).collect::<Vec<_>>().join(" "))
}

fn mapi() -> Outcome {
    let cfg = small_lm();
    let lm = DualLm::<f64>::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let prompt = random_grid(4, 6, 16, &mut rng);
    let text = [3usize, 7, 9];
    let sampling = SamplingConfig::greedy(12);

    // P = 1 equals the plain path bit for bit, on the hidden state and the decode
    let plain_head = AggregationHead::<f64>::new(cfg.semantic_dim, 1);
    let plan1 = StreamMaskPlan::new(1, 0.5, 3).unwrap();
    let prefill = |stepper: &mut dyn SemanticStepper<f64>| {
        let mut t = Tape::new();
        let p = lm.params.bind(&mut t, false);
        let (x, audio) = prompt_input(&lm, &mut t, &p, &[], &text, Some(&prompt)).unwrap();
        stepper.prefill(&lm, &mut t, &p, &x, audio).unwrap()
    };
    let h_plain = prefill(&mut PlainStepper::default());
    let h_one = prefill(&mut MapiStepper::new(plan1.clone(), &plain_head).unwrap());
    let same_hidden = h_plain.data().iter().zip(h_one.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let g_plain = generate(&lm, &mut PlainStepper::default(), &[], &text, Some(&prompt), &sampling).unwrap();
    let mut one = MapiStepper::new(plan1, &plain_head).unwrap();
    let g_one = generate(&lm, &mut one, &[], &text, Some(&prompt), &sampling).unwrap();
    let p1 = same_hidden && g_plain == g_one;

    // P = 4 with a non-trivial head: weights normalised, decodes repeatable
    let mut head = AggregationHead::<f64>::new(cfg.semantic_dim, 2);
    let ids: Vec<_> = head.params.ids().collect();
    for id in ids {
        let shape = head.params.get(id).shape().to_vec();
        let n = shape.iter().product();
        *head.params.get_mut(id) = normal(1, n, &mut rng).reshape(shape).unwrap();
    }
    let plan = StreamMaskPlan::new(4, 0.3, 77).unwrap();
    let mut runs = Vec::new();
    let mut worst = 0.0f64;
    let mut steps = 0;
    for _ in 0..10 {
        let mut st = MapiStepper::new(plan.clone(), &head).unwrap();
        let g = generate(&lm, &mut st, &[], &text, Some(&prompt), &sampling).unwrap();
        for w in &st.weights {
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
        }
        steps = st.weights.len();
        runs.push(g);
    }
    let repeat = runs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        p1 && worst < 1e-6 && repeat,
        format!(
            "P=1 bit-identical: {p1}; P=4 max |sum w - 1| = {worst:.1e} over {steps} steps; 10 decodes identical: {repeat} ({} frames)",
            runs[0].frames.len()
        ),
    )
}

fn codec_overfit() -> Outcome {
    let start = Instant::now();
    let data = synth_dataset(&SynthSpec::default()).unwrap();
    let clips: Vec<Clip<f32>> = data.iter().map(|u| Clip { wave: u.wave.clone(), teacher: Some(u.teacher.clone()) }).collect();
    let model = CodecModel::<f32>::new(CodecConfig::tiny(), 1).unwrap();
    let mut tr = CodecTrainer::new(
        model,
        DiscConfig::tiny(),
        LossWeights::default(),
        MelLossConfig::tiny(),
        CodecTrainConfig::default(),
        1,
    )
    .unwrap();
    let mut mel0 = f64::NAN;
    for step in 0..2000 {
        let m = tr.train_step(&clips).unwrap();
        if step == 0 {
            mel0 = m.mel;
        }
    }
    let mel = tr.evaluate(&clips).unwrap().mel;
    let rec = tr.reconstruct_batch(&clips).unwrap();
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let all_ref: Vec<f64> = clips.iter().flat_map(|c| to64(&c.wave)).collect();
    let all_rec: Vec<f64> = rec.iter().flat_map(|r| to64(r)).collect();
    let snr = snr_db(&all_ref, &all_rec).unwrap();
    let per_clip: Vec<f64> = clips.iter().zip(&rec).map(|(c, r)| snr_db(&to64(&c.wave), &to64(r)).unwrap()).collect();
    let drop = 1.0 - mel / mel0;
    outcome(
        drop >= 0.5 && snr >= 10.0,
        format!(
            "mel {mel0:.3} -> {mel:.3} ({:.1}% lower), SNR {snr:.2} dB (per clip {}), {:.0}s",
            100.0 * drop,
            per_clip.iter().map(|s| format!("{s:.1}")).collect::<Vec<_>>().join("/"),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn lm_overfit() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec { count: 8, words_per_utterance: 2, word_len: 128, ..Default::default() };
    let data = synth_dataset(&spec).unwrap();
    let clips: Vec<Clip<f32>> = data.iter().map(|u| Clip { wave: u.wave.clone(), teacher: Some(u.teacher.clone()) }).collect();
    let model = CodecModel::<f32>::new(CodecConfig::tiny(), 1).unwrap();
    let mut ctr = CodecTrainer::new(
        model,
        DiscConfig::tiny(),
        LossWeights::default(),
        MelLossConfig::tiny(),
        CodecTrainConfig::default(),
        1,
    )
    .unwrap();
    ctr.init_codebooks(&clips).unwrap();
    let tok = ByteTokenizer;
    let exs: Vec<LmExample> = data
        .iter()
        .map(|u| LmExample { text: tok.encode(&u.transcript), codes: ctr.model.encode_codes(&u.wave).unwrap().0 })
        .collect();
    let distinct: Vec<usize> = (0..4)
        .map(|k| {
            let mut s: Vec<usize> = exs.iter().flat_map(|e| e.codes.row(k)).collect();
            s.sort_unstable();
            s.dedup();
            s.len()
        })
        .collect();
    let mut tr = LmTrainer::new(DualLm::<f32>::new(LmConfig::tiny(), 3).unwrap(), LmTrainConfig::tiny());
    for _ in 0..500 {
        tr.train_step(&exs).unwrap();
    }
    let mut acc = [0.0f64; 4];
    for e in &exs {
        for (a, v) in acc.iter_mut().zip(tr.model.accuracy(e).unwrap()) {
            *a += v / exs.len() as f64;
        }
    }
    let mean_acc = acc.iter().sum::<f64>() / 4.0;
    let (mut hits, mut n) = (0, 0);
    let prompt_frames = 8;
    for e in &exs {
        let prompt = e.codes.truncate(prompt_frames).unwrap();
        let g = generate(&tr.model, &mut PlainStepper::default(), &e.text, &[], Some(&prompt), &SamplingConfig::greedy(64))
            .unwrap();
        let reference = e.codes.row(0);
        for (j, &c) in reference.iter().enumerate().skip(prompt_frames) {
            n += 1;
            if g.frames.get(j - prompt_frames).map(|f| f[0]) == Some(c) {
                hits += 1;
            }
        }
    }
    let gen_acc = hits as f64 / n as f64;
    outcome(
        acc[0] >= 0.95 && mean_acc >= 0.90 && gen_acc >= 0.90,
        format!(
            "teacher-forced acc per level [{}] mean {mean_acc:.3}; greedy codebook-0 match {hits}/{n} ({:.1}%); \
             distinct codes per level {distinct:?}; {:.0}s",
            acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", "),
            100.0 * gen_acc,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn causality() -> Outcome {
    let cfg = small_lm();
    let lm = DualLm::<f64>::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let frames = 4;
    let k = cfg.n_codebooks;
    let d = cfg.semantic_dim;
    let s_in = normal(frames, d, &mut rng);
    let text = [4usize, 5];

    // semantic: prediction row i may only see speech rows <= i
    let mut sem_leak = 0.0f64;
    let mut sem_used = 0.0f64;
    for i in 0..frames {
        let mut t = Tape::new();
        let p = lm.params.bind(&mut t, false);
        let s = t.leaf(s_in.clone());
        let out = lm.semantic_forward(&mut t, &p, &text, s).unwrap();
        let row = t.slice_rows(out, i, 1);
        let y = t.sum(row);
        let g = t.backward(y).wrt_or_zero(s);
        for j in 0..frames {
            let m = g.row(j).iter().map(|v| v.abs()).fold(0.0, f64::max);
            if j > i {
                sem_leak = sem_leak.max(m);
            } else {
                sem_used = sem_used.max(m);
            }
        }
    }

    // acoustic: level l of frame j may only see that frame's condition and levels < l
    let h = normal(frames, d, &mut rng);
    let codes = random_grid(k, frames, cfg.codebook_size, &mut rng);
    let levels: Vec<Vec<usize>> = (0..k - 1).map(|l| codes.row(l)).collect();
    let rows = {
        let mut t = Tape::new();
        let p = lm.params.bind(&mut t, false);
        let hv = t.constant(h.clone());
        let seq = lm.acoustic_input(&mut t, &p, hv, &levels);
        t.value(seq).clone()
    };
    let mut ac_leak = 0.0f64;
    let mut ac_used = 0.0f64;
    for j in 0..frames {
        for l in 0..k {
            let mut t = Tape::new();
            let p = lm.params.bind(&mut t, false);
            let seq = t.leaf(rows.clone());
            let logits = lm.acoustic_logits(&mut t, &p, seq);
            let r = t.slice_rows(logits[l], j, 1);
            let y = t.sum(r);
            let g = t.backward(y).wrt_or_zero(seq);
            for f in 0..frames {
                for slot in 0..k {
                    let m = g.row(f * k + slot).iter().map(|v| v.abs()).fold(0.0, f64::max);
                    // slot 0 is the condition, slot s > 0 embeds level s - 1
                    if f != j || slot > l {
                        ac_leak = ac_leak.max(m);
                    } else {
                        ac_used = ac_used.max(m);
                    }
                }
            }
        }
    }
    let pass = sem_leak < 1e-9 && ac_leak < 1e-9 && sem_used > 1e-6 && ac_used > 1e-6;
    outcome(
        pass,
        format!(
            "{frames} frames x {k} levels: max future->past {sem_leak:.1e}, max higher->lower/cross-frame {ac_leak:.1e} \
             (allowed paths reach {:.1e} / {:.1e})",
            sem_used, ac_used
        ),
    )
}

fn distill_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut lo, mut hi, mut scale_err) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let l = rng.random_range(1..6);
        let a = normal(l, 8, &mut rng);
        let b = normal(l, 8, &mut rng);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let v = cosine_distance(&mut t, av, bv);
        let v = t.scalar(v);
        lo = lo.min(v);
        hi = hi.max(v);
        let alpha: f64 = rng.random_range(1e-3..1e3);
        scale_err = scale_err.max((cosine_distance_value(&a.map(|x| x * alpha), &b) - v).abs());
    }
    let u = Tensor::<f64>::new(vec![1, 3], vec![1.0, 2.0, -0.5]).unwrap();
    let orth = Tensor::<f64>::new(vec![1, 3], vec![2.0, -1.0, 0.0]).unwrap();
    let cases = [
        cosine_distance_value(&u, &u.map(|x| 3.0 * x)),
        cosine_distance_value(&u, &orth),
        cosine_distance_value(&u, &u.map(|x| -0.5 * x)),
    ];
    // exact up to the epsilon guard in the cosine denominator
    let exact = cases.iter().zip([0.0, 1.0, 2.0]).all(|(g, w)| (g - w).abs() < 10.0 * COSINE_EPS);
    outcome(
        lo >= 0.0 && hi <= 2.0 && scale_err < 1e-6 && exact,
        format!(
            "1000 pairs in [{lo:.3}, {hi:.3}], scale error {scale_err:.1e}, parallel/orthogonal/anti = {:.1e}/{}/{:.9}",
            cases[0], cases[1], cases[2]
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("bitrate and frame-rate arithmetic", bitrates),
        ("gradient suites", gradient_suites),
        ("likelihood factorisation", factorization),
        ("split quantizer semantics", split_rvq),
        ("hinge loss tables", hinge_tables),
        ("parallel-stream degeneracy and stability", mapi),
        ("codec overfit, 2000 steps", codec_overfit),
        ("token LM overfit, 500 steps", lm_overfit),
        ("causality Jacobians", causality),
        ("distillation bounds and invariance", distill_bounds),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
