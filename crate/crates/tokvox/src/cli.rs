//! Command-line surface. Usage errors exit 2, runtime failures exit 1.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tokvox_core::codec::train::Clip;
use tokvox_core::eval::EvalConfig;
use tokvox_core::gradsuite;
use tokvox_core::lm::{ByteTokenizer, SamplingConfig, Tokenizer};
use tokvox_core::synth::SynthSpec;

use crate::config::RunConfig;
use crate::data::{load_utterances, make_data};
use crate::drivers::{self, Parallel};
use crate::error::{Error, Result};
use crate::formats::{read_grid, write_grid, GridFile};
use crate::journal::Journal;
use crate::wav::{read_wav, write_wav};

#[derive(Debug, Parser)]
#[command(name = "tokvox", version, about = "Split-quantizer speech codec and dual token LM")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run config; defaults to the chosen preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "tiny")]
    pub preset: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "journal.ndjson")]
    pub journal: PathBuf,
    /// Leave wall time out of the journal so reruns are byte-identical.
    #[arg(long, global = true)]
    pub no_wall_time: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus (WAV, teacher embeddings, manifest).
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        words: usize,
        /// Samples per word.
        #[arg(long, default_value_t = 256)]
        word_len: usize,
    },
    /// Train the codec and write a checkpoint.
    CodecTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// WAV to code grid.
    CodecEncode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Code grid to WAV.
    CodecDecode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the dual LM (and optionally the aggregation head) on codec tokens.
    LmTrain {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        head_steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Text plus optional prompt to speech.
    Synth(SynthArgs),
    /// Reconstruction metrics of a codec over a manifest.
    Eval {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the gradient-check suites.
    Gradcheck {
        /// Run one suite only.
        #[arg(long)]
        suite: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Transcript of the prompt audio.
    #[arg(long, default_value = "")]
    pub prompt_text: String,
    #[arg(long, conflicts_with = "prompt_codes")]
    pub prompt_wav: Option<PathBuf>,
    #[arg(long)]
    pub prompt_codes: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the generated codes.
    #[arg(long)]
    pub codes_out: Option<PathBuf>,
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    #[arg(long, default_value_t = 256)]
    pub max_frames: usize,
    /// Masked parallel streams; omit to decode a single unmasked stream.
    #[arg(long)]
    pub parallel_streams: Option<usize>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    #[arg(long)]
    pub mapi_seed: Option<u64>,
}

#[derive(Serialize)]
struct Start<'a> {
    command: &'a str,
    preset: &'a str,
    seed: u64,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&g.preset)?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.manifest".into()))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::MakeData { .. } => "make-data",
        Command::CodecTrain { .. } => "codec-train",
        Command::CodecEncode { .. } => "codec-encode",
        Command::CodecDecode { .. } => "codec-decode",
        Command::LmTrain { .. } => "lm-train",
        Command::Synth(_) => "synth",
        Command::Eval { .. } => "eval",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let cfg = load_config(&cli.global)?;
    let mut journal = Journal::create(&cli.global.journal, !cli.global.no_wall_time)?;
    journal.record("start", &Start { command: command_name(&cli.command), preset: &cfg.preset, seed: cfg.seed })?;
    let code = match &cli.command {
        Command::MakeData { out, count, words, word_len } => {
            let spec = SynthSpec {
                count: *count,
                words_per_utterance: *words,
                word_len: *word_len,
                sample_rate: cfg.codec.sample_rate,
                hop: cfg.codec.hop(),
                teacher_dim: cfg.codec.teacher_dim,
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            let m = make_data(out, &spec)?;
            journal.record("make-data", &serde_json::json!({ "manifest": m, "count": count }))?;
            println!("{}", m.display());
            0
        }
        Command::CodecTrain { data, out, steps, resume } => {
            let utts = load_utterances(&manifest(&cfg, data)?, cfg.codec.sample_rate)?;
            let clips: Vec<Clip<f32>> = utts.iter().map(|u| u.clip()).collect();
            let mut tr = match resume {
                Some(p) => drivers::load_codec_trainer(&cfg, p)?,
                None => drivers::new_codec_trainer(&cfg)?,
            };
            let steps = steps.unwrap_or(cfg.schedule.codec_steps);
            let m = drivers::train_codec(&mut tr, &clips, steps, cfg.schedule.batch_size, cfg.schedule.log_every, &mut journal)?;
            drivers::codec_checkpoint(&tr).save(out)?;
            cfg.save(&sidecar(out))?;
            if let Some(last) = m.last() {
                println!("step {} mel {:.4} total {:.4}", last.step, last.mel, last.total);
            }
            0
        }
        Command::CodecEncode { codec, input, output } => {
            let model = drivers::load_codec(&cfg, codec)?;
            let wave = read_wav(input, cfg.codec.sample_rate)?;
            let (grid, pad) = model.encode_codes(&wave)?;
            journal.record("codec-encode", &serde_json::json!({ "samples": wave.len(), "frames": grid.len(), "pad": pad }))?;
            write_grid(output, &GridFile { grid, pad })?;
            0
        }
        Command::CodecDecode { codec, input, output } => {
            let model = drivers::load_codec(&cfg, codec)?;
            let g = read_grid(input)?;
            let mut wave = model.decode_codes(&g.grid)?;
            wave.truncate(wave.len().saturating_sub(g.pad));
            journal.record("codec-decode", &serde_json::json!({ "frames": g.grid.len(), "samples": wave.len() }))?;
            write_wav(output, &wave, cfg.codec.sample_rate)?;
            0
        }
        Command::LmTrain { codec, data, out, steps, head_steps, resume } => {
            let model = drivers::load_codec(&cfg, codec)?;
            let utts = load_utterances(&manifest(&cfg, data)?, cfg.codec.sample_rate)?;
            let examples = drivers::lm_examples(&model, &utts)?;
            let (mut tr, mut head) = match resume {
                Some(p) => drivers::load_lm_trainer(&cfg, p)?,
                None => (drivers::new_lm_trainer(&cfg)?, drivers::new_head(&cfg)),
            };
            let steps = steps.unwrap_or(cfg.schedule.lm_steps);
            let m = drivers::train_lm(&mut tr, &examples, steps, cfg.schedule.log_every, &mut journal)?;
            let mut hcfg = cfg.clone();
            if let Some(h) = head_steps {
                hcfg.schedule.head_steps = *h;
            }
            if hcfg.schedule.head_steps > 0 {
                drivers::fit_head(&hcfg, &tr.model, &mut head, &examples, &mut journal)?;
            }
            drivers::lm_checkpoint(&tr, &head).save(out)?;
            cfg.save(&sidecar(out))?;
            if let Some(last) = m.last() {
                println!("step {} total {:.4} ctx {:.5} acoustic {:.4}", last.step, last.total, last.ctx, last.acoustic);
            }
            0
        }
        Command::Synth(a) => {
            synth(&cfg, a, &mut journal)?;
            0
        }
        Command::Eval { codec, data } => {
            let model = drivers::load_codec(&cfg, codec)?;
            let utts = load_utterances(&manifest(&cfg, data)?, cfg.codec.sample_rate)?;
            let ecfg = EvalConfig { sample_rate: cfg.codec.sample_rate as f64, ..EvalConfig::default() };
            let m = drivers::evaluate_codec(&model, &utts, &ecfg)?;
            journal.record("eval", &m)?;
            println!("{}", serde_json::to_string(&m)?);
            0
        }
        Command::Gradcheck { suite } => {
            let gc = gradsuite::default_config();
            let results = match suite {
                Some(s) => vec![gradsuite::run_suite(s, &gc)?],
                None => gradsuite::run_all(&gc)?,
            };
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<18} max_rel_error {:.3e} (tol {:.0e}) coords {} kinks {} {}",
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    r.coords,
                    r.kinks,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                journal.record("gradcheck", r)?;
            }
            if ok {
                0
            } else {
                1
            }
        }
    };
    journal.record("end", &serde_json::json!({ "exit": code }))?;
    Ok(code)
}

fn synth(cfg: &RunConfig, a: &SynthArgs, journal: &mut Journal) -> Result<()> {
    let codec = drivers::load_codec(cfg, &a.codec)?;
    let (lm, head) = drivers::load_lm_trainer(cfg, &a.lm)?;
    let tok = ByteTokenizer;
    let prompt = match (&a.prompt_wav, &a.prompt_codes) {
        (Some(w), _) => Some(codec.encode_codes(&read_wav(w, cfg.codec.sample_rate)?)?.0),
        (None, Some(c)) => Some(read_grid(c)?.grid),
        (None, None) => None,
    };
    let sampling = SamplingConfig {
        greedy: a.greedy,
        temperature: a.temperature,
        top_k: a.top_k,
        max_frames: a.max_frames,
        seed: cfg.seed,
    };
    let parallel = a.parallel_streams.map(|streams| Parallel {
        streams,
        mask_prob: a.mask_prob.unwrap_or(cfg.mapi.mask_prob),
        seed: a.mapi_seed.unwrap_or(cfg.mapi.seed),
    });
    let s = drivers::synthesize(
        cfg,
        &codec,
        &lm.model,
        &head,
        &tok.encode(&a.prompt_text),
        &tok.encode(&a.text),
        prompt.as_ref(),
        &sampling,
        parallel,
    )?;
    for (step, w) in s.weights.iter().enumerate() {
        journal.record("mapi-weights", &serde_json::json!({ "step": step, "weights": w }))?;
    }
    journal.record(
        "synth",
        &serde_json::json!({
            "frames": s.generation.frames.len(),
            "truncated": s.generation.truncated,
            "acoustic_calls": s.generation.acoustic_calls,
            "samples": s.wave.len(),
        }),
    )?;
    if let Some(p) = &a.codes_out {
        let grid = s.generation.to_grid(cfg.codec.codebook_size)?;
        write_grid(p, &GridFile { grid, pad: 0 })?;
    }
    write_wav(&a.output, &s.wave, cfg.codec.sample_rate)?;
    println!("{} frames, {} samples", s.generation.frames.len(), s.wave.len());
    Ok(())
}
