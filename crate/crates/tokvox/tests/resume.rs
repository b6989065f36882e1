use tokvox::data::{load_utterances, make_data};
use tokvox::drivers;
use tokvox::journal::Journal;
use tokvox::RunConfig;
use tokvox_core::codec::train::Clip;
use tokvox_core::synth::SynthSpec;

fn corpus(dir: &std::path::Path) -> Vec<tokvox::data::Utterance> {
    let spec = SynthSpec { count: 3, words_per_utterance: 2, word_len: 128, ..Default::default() };
    let m = make_data(dir, &spec).unwrap();
    load_utterances(&m, 16000).unwrap()
}

#[test]
fn codec_checkpoint_resumes_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let utts = corpus(dir.path());
    let clips: Vec<Clip<f32>> = utts.iter().map(|u| u.clip()).collect();
    let cfg = RunConfig::tiny();
    let mut j = Journal::create(&dir.path().join("j"), false).unwrap();
    let mut tr = drivers::new_codec_trainer(&cfg).unwrap();
    drivers::train_codec(&mut tr, &clips, 3, 4, 1, &mut j).unwrap();
    let path = dir.path().join("c.s3ck");
    drivers::codec_checkpoint(&tr).save(&path).unwrap();

    let before = tr.evaluate(&clips).unwrap();
    let mut back = drivers::load_codec_trainer(&cfg, &path).unwrap();
    let after = back.evaluate(&clips).unwrap();
    assert!((before.total - after.total).abs() <= 1e-6 * before.total.abs().max(1.0), "{before:?} vs {after:?}");
    assert_eq!(back.step, 3);
    assert_eq!(back.gen_opt, tr.gen_opt);

    // the next update matches too
    let a = tr.train_step(&clips).unwrap();
    let b = back.train_step(&clips).unwrap();
    assert!((a.total - b.total).abs() <= 1e-6 * a.total.abs().max(1.0));
}

#[test]
fn lm_checkpoint_resumes_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let utts = corpus(dir.path());
    let cfg = RunConfig::tiny();
    let codec = drivers::new_codec_trainer(&cfg).unwrap().model;
    let data = drivers::lm_examples(&codec, &utts).unwrap();
    let mut j = Journal::create(&dir.path().join("j"), false).unwrap();
    let mut tr = drivers::new_lm_trainer(&cfg).unwrap();
    drivers::train_lm(&mut tr, &data, 3, 1, &mut j).unwrap();
    let mut head = drivers::new_head(&cfg);
    let mut hcfg = cfg.clone();
    hcfg.schedule.head_steps = 2;
    drivers::fit_head(&hcfg, &tr.model, &mut head, &data, &mut j).unwrap();
    let path = dir.path().join("lm.s3ck");
    drivers::lm_checkpoint(&tr, &head).save(&path).unwrap();

    let (back, head2) = drivers::load_lm_trainer(&cfg, &path).unwrap();
    let (a, b) = (tr.evaluate(&data).unwrap(), back.evaluate(&data).unwrap());
    assert!((a.total - b.total).abs() <= 1e-6 * a.total.abs().max(1.0));
    assert_eq!(back.opt.step, 3);
    assert_eq!(head2.params.iter().collect::<Vec<_>>(), head.params.iter().collect::<Vec<_>>());
}

#[test]
fn wrong_config_for_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::tiny();
    let tr = drivers::new_codec_trainer(&cfg).unwrap();
    let path = dir.path().join("c.s3ck");
    drivers::codec_checkpoint(&tr).save(&path).unwrap();
    let mut other = cfg.clone();
    other.codec.latent_dim = 16;
    assert!(drivers::load_codec(&other, &path).is_err());
}
