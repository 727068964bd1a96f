//! Command-line surface: toy-model creation, calibration, conversion,
//! verification, cache benchmarking, and greedy generation.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::attention::{decode_step, CacheConfig, CacheQuant, DecodeState, DecodeVariant};
use crate::cachemodel::{self, QuantSpec};
use crate::calib::{compute_norm_stats, load_stats, save_stats};
use crate::convert::{build_selection, convert_checkpoint, ConvertOptions};
use crate::error::{Error, Result};
use crate::lowrank::SvdMode;
use crate::model::Model;
use crate::rope::Strategy;
use crate::tensorio::{
    default_r, gen_corpus, load_checkpoint, load_corpus, save_checkpoint, save_corpus, Checkpoint,
    CheckpointKind, ModelConfig,
};
use crate::verify::run_verify;

/// Sequences beyond this count are ignored during calibration.
const CALIB_SAMPLE_CAP: usize = 1024;

#[derive(Parser)]
#[command(
    name = "mlaforge",
    version,
    about = "Convert MHA/GQA checkpoints to multi-head latent attention and verify the conversion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Create a deterministic toy checkpoint (and optionally a synthetic
    /// calibration corpus).
    InitToy {
        /// Model config as inline JSON or a path to a JSON file.
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a synthetic token corpus here.
        #[arg(long)]
        corpus_out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        corpus_seqs: usize,
        #[arg(long, default_value_t = 32)]
        corpus_len: usize,
        /// Corpus RNG seed; defaults to `seed + 1`.
        #[arg(long)]
        corpus_seed: Option<u64>,
    },
    /// Compute head-wise 2-norm contribution statistics.
    Stats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a full-RoPE checkpoint into latent-attention form.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Calibration stats JSON (required for the two_norm strategy).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// high | low | uniform | two_norm
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        r: Option<usize>,
        /// Latent width per kv head.
        #[arg(long)]
        dkv: Option<usize>,
        /// split | joint
        #[arg(long)]
        svd: Option<String>,
        /// Force one global two-norm set instead of per-layer/per-group sets.
        #[arg(long)]
        two_norm_global: bool,
        /// Factorize each kv head separately (ablation).
        #[arg(long)]
        per_head: bool,
    },
    /// Run the exactness-chain suite against a source/converted pair.
    Verify {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        converted: PathBuf,
        /// Token corpus file; random sequences are drawn when absent.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        seqs: usize,
        #[arg(long, default_value_t = 32)]
        len: usize,
        #[arg(long)]
        json: bool,
    },
    /// KV-cache memory accounting for a preset or explicit geometry.
    Bench {
        /// 135M | 360M | 1B7 | 7B | 13B
        #[arg(long)]
        preset: Option<String>,
        /// Model config as inline JSON or a path (alternative to --preset).
        #[arg(long)]
        config: Option<String>,
        /// Latent width per kv head; defaults to the three paper settings.
        #[arg(long)]
        dkv: Option<usize>,
        /// Cache payload bits (2, 4, 8; 16 = unquantized).
        #[arg(long, default_value_t = 16)]
        quant: u64,
        #[arg(long, default_value_t = 32)]
        group_size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Greedy decoding with a chosen forward variant and cache layout.
    Run {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated token ids.
        #[arg(long)]
        prompt_ids: String,
        #[arg(long, default_value_t = 0)]
        steps: usize,
        /// full | partial | mla | mla-absorbed
        #[arg(long)]
        variant: String,
        /// full | latent | quant4 | quant2
        #[arg(long, default_value = "full")]
        cache: String,
        /// Quantize the packed RoPE key rows too.
        #[arg(long)]
        quant_rope: bool,
        /// Stats JSON, needed for --variant partial under two_norm.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::InitToy { config, seed, out, corpus_out, corpus_seqs, corpus_len, corpus_seed } => {
            cmd_init_toy(&config, seed, &out, corpus_out, corpus_seqs, corpus_len, corpus_seed)
        }
        Cmd::Stats { ckpt, corpus, out } => cmd_stats(&ckpt, &corpus, &out),
        Cmd::Convert { ckpt, out, stats, strategy, r, dkv, svd, two_norm_global, per_head } => {
            cmd_convert(&ckpt, &out, stats, strategy, r, dkv, svd, two_norm_global, per_head)
        }
        Cmd::Verify { src, converted, tokens, seed, seqs, len, json } => {
            cmd_verify(&src, &converted, tokens, seed, seqs, len, json)
        }
        Cmd::Bench { preset, config, dkv, quant, group_size, json } => {
            cmd_bench(preset.as_deref(), config.as_deref(), dkv, quant, group_size, json)
        }
        Cmd::Run { ckpt, prompt_ids, steps, variant, cache, quant_rope, stats } => {
            cmd_run(&ckpt, &prompt_ids, steps, &variant, &cache, quant_rope, stats)
        }
    }
}

fn parse_config_arg(arg: &str) -> Result<ModelConfig> {
    let json = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg)?
    };
    ModelConfig::from_json(&json)
}

fn cmd_init_toy(
    config: &str,
    seed: u64,
    out: &PathBuf,
    corpus_out: Option<PathBuf>,
    corpus_seqs: usize,
    corpus_len: usize,
    corpus_seed: Option<u64>,
) -> Result<()> {
    let cfg = parse_config_arg(config)?;
    let store = crate::tensorio::init_toy(&cfg, seed)?;
    let ckpt = Checkpoint { config: cfg.clone(), kind: CheckpointKind::Full, conversion: None, store };
    save_checkpoint(&ckpt, out)?;
    println!("wrote checkpoint {} ({} tensors)", out.display(), ckpt.store.len());
    if let Some(corpus_path) = corpus_out {
        let corpus = gen_corpus(cfg.vocab, corpus_seed.unwrap_or(seed + 1), corpus_seqs, corpus_len);
        save_corpus(&corpus, &corpus_path)?;
        println!(
            "wrote corpus {} ({} x {} tokens, digest {})",
            corpus_path.display(),
            corpus_seqs,
            corpus_len,
            &corpus.digest()[..16]
        );
    }
    Ok(())
}

fn cmd_stats(ckpt: &PathBuf, corpus: &PathBuf, out: &PathBuf) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    if ckpt.kind != CheckpointKind::Full {
        return Err(Error::Usage("stats needs an unconverted checkpoint".into()));
    }
    let mut corpus = load_corpus(corpus)?;
    if corpus.sequences.len() > CALIB_SAMPLE_CAP {
        corpus.sequences.truncate(CALIB_SAMPLE_CAP);
    }
    let stats = compute_norm_stats(&ckpt, &corpus)?;
    save_stats(&stats, out)?;
    println!(
        "wrote stats {} ({} samples x {} tokens)",
        out.display(),
        stats.n_samples,
        stats.seq_len
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    ckpt_path: &PathBuf,
    out: &PathBuf,
    stats_path: Option<PathBuf>,
    strategy: Option<String>,
    r: Option<usize>,
    dkv: Option<usize>,
    svd: Option<String>,
    two_norm_global: bool,
    per_head: bool,
) -> Result<()> {
    let src = load_checkpoint(ckpt_path)?;
    let stats = stats_path.map(load_stats).transpose()?;
    let opts = ConvertOptions {
        strategy: strategy.as_deref().map(Strategy::parse).transpose()?,
        r,
        d_kv_per_head: dkv,
        svd_mode: svd.as_deref().map(SvdMode::parse).transpose()?,
        two_norm_global,
        per_head,
    };
    let conv = convert_checkpoint(&src, stats.as_ref(), &opts)?;
    let meta = conv.conversion.as_ref().expect("conversion always records metadata");
    for (l, (d, i)) in meta.discarded_sq.iter().zip(&meta.input_sq).enumerate() {
        let discarded: f64 = d.iter().sum();
        let input: f64 = i.iter().sum();
        println!(
            "layer {l}: discarded_sq_sum {discarded:.6e} (relative {:.3e})",
            if input > 0.0 { discarded / input } else { 0.0 }
        );
    }
    save_checkpoint(&conv, out)?;
    println!(
        "wrote converted checkpoint {} (strategy {}, r {}, d_kv/head {}, svd {})",
        out.display(),
        conv.config.strategy.name(),
        conv.config.r,
        conv.config.d_kv_per_head,
        conv.config.svd_mode.name()
    );
    Ok(())
}

fn cmd_verify(
    src: &PathBuf,
    converted: &PathBuf,
    tokens: Option<PathBuf>,
    seed: u64,
    seqs: usize,
    len: usize,
    json: bool,
) -> Result<()> {
    let src = load_checkpoint(src)?;
    let conv = load_checkpoint(converted)?;
    let (sequences, digest) = match tokens {
        Some(path) => {
            let corpus = load_corpus(&path)?;
            corpus.check_vocab(src.config.vocab)?;
            let digest = corpus.digest();
            (corpus.sequences, Some(digest))
        }
        None => (gen_corpus(src.config.vocab, seed, seqs, len).sequences, None),
    };
    let report = run_verify(&src, &conv, &sequences, digest.as_deref())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render_table());
    }
    if report.pass {
        Ok(())
    } else {
        Err(Error::Verify("exactness chain exceeded tolerance".into()))
    }
}

/// Geometry of the five reference models; serves `bench` only.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let (d, n_h, n_g, d_h, n_layers) = match name {
        "135M" => (576, 9, 3, 64, 30),
        "360M" => (960, 15, 5, 64, 32),
        "1B7" => (2048, 32, 32, 64, 24),
        "7B" => (4096, 32, 32, 128, 32),
        "13B" => (5120, 40, 40, 128, 40),
        other => return Err(Error::Usage(format!("unknown preset `{other}`"))),
    };
    Ok(ModelConfig {
        d,
        n_h,
        n_g,
        d_h,
        n_layers,
        rope_base: 1e4,
        vocab: 32000,
        strategy: Strategy::TwoNorm,
        r: default_r(d_h),
        d_kv_per_head: d_h / 2,
        svd_mode: SvdMode::Joint,
    })
}

fn cmd_bench(
    preset_name: Option<&str>,
    config: Option<&str>,
    dkv: Option<usize>,
    quant: u64,
    group_size: usize,
    json: bool,
) -> Result<()> {
    let mut cfg = match (preset_name, config) {
        (Some(name), None) => preset(name)?,
        (None, Some(json_arg)) => parse_config_arg(json_arg)?,
        _ => return Err(Error::Usage("bench needs exactly one of --preset or --config".into())),
    };
    if !matches!(quant, 2 | 4 | 8 | 16) {
        return Err(Error::Usage(format!("--quant must be 2, 4, 8, or 16, got {quant}")));
    }
    let dkv_list: Vec<usize> = match dkv {
        Some(v) => vec![v],
        None => vec![cfg.d_h / 2, cfg.d_h / 4, cfg.d_h / 8],
    };

    let mut rows = Vec::new();
    for d_kv in dkv_list {
        cfg.d_kv_per_head = d_kv;
        cfg.validate()?;
        rows.push((d_kv, cachemodel::report(&cfg, 16, group_size)));
        if quant < 16 {
            rows.push((d_kv, cachemodel::report(&cfg, quant, group_size)));
        }
    }

    if json {
        let payload = serde_json::json!({
            "d": cfg.d, "n_h": cfg.n_h, "n_g": cfg.n_g, "d_h": cfg.d_h, "r": cfg.r,
            "rows": rows.iter().map(|(d_kv, r)| {
                let mut v = serde_json::to_value(r).expect("report serializes");
                v["d_kv_per_head"] = (*d_kv).into();
                v
            }).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&payload).expect("payload serializes"));
    } else {
        println!(
            "{:<6} {:<4} {:<4} {:<16} {:>5} {:>9} {:>10} {:>10}",
            "d_h", "r", "d_kv", "variant", "bits", "scalars", "meta-bits", "KV Mem."
        );
        for (d_kv, r) in &rows {
            println!(
                "{:<6} {:<4} {:<4} {:<16} {:>5} {:>9} {:>10} {:>10}",
                cfg.d_h,
                cfg.r,
                d_kv,
                r.variant,
                r.bits,
                r.scalars_per_token_layer,
                r.metadata_bits,
                r.kv_mem
            );
        }
    }
    Ok(())
}

fn parse_prompt(ids: &str) -> Result<Vec<u32>> {
    ids.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Usage(format!("bad token id `{s}` in --prompt-ids")))
        })
        .collect()
}

fn logits_digest(logits: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in logits {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn greedy_argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn cmd_run(
    ckpt_path: &PathBuf,
    prompt_ids: &str,
    steps: usize,
    variant: &str,
    cache: &str,
    quant_rope: bool,
    stats_path: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let prompt = parse_prompt(prompt_ids)?;
    if prompt.is_empty() {
        return Err(Error::Usage("--prompt-ids must contain at least one token".into()));
    }

    let variant = match variant {
        "full" => DecodeVariant::Full,
        "partial" => DecodeVariant::Partial,
        "mla" => DecodeVariant::MlaNaive,
        "mla-absorbed" => DecodeVariant::MlaAbsorbed,
        other => return Err(Error::Usage(format!("unknown variant `{other}`"))),
    };
    let cache = match cache {
        "full" => CacheConfig::Full,
        "latent" => CacheConfig::Latent,
        "quant4" => CacheConfig::Quantized(CacheQuant {
            spec: QuantSpec::new(4, 32)?,
            include_rope: quant_rope,
        }),
        "quant2" => CacheConfig::Quantized(CacheQuant {
            spec: QuantSpec::new(2, 32)?,
            include_rope: quant_rope,
        }),
        other => return Err(Error::Usage(format!("unknown cache layout `{other}`"))),
    };

    let sel = if variant == DecodeVariant::Partial {
        let cfg = &ckpt.config;
        let sel = match cfg.strategy {
            Strategy::TwoNorm => {
                let stats_path = stats_path.ok_or_else(|| {
                    Error::Usage("--variant partial under two_norm needs --stats".into())
                })?;
                let stats = load_stats(&stats_path)?;
                build_selection(cfg, Some(&stats), &ConvertOptions::default())?
            }
            _ => build_selection(cfg, None, &ConvertOptions::default())?,
        };
        Some(sel)
    } else {
        None
    };

    let model: Model<f32> = Model::from_checkpoint(&ckpt)?;
    let mut st = DecodeState::new(&model, variant, cache, sel)?;
    let mut tokens = prompt.clone();
    let mut last_logits: Option<Vec<f32>> = None;
    for (i, &t) in prompt.iter().enumerate() {
        let logits = decode_step(&model, &mut st, t)?;
        println!("prefill {i}: token={t} logits={}", logits_digest(&logits));
        last_logits = Some(logits);
    }
    for step in 0..steps {
        let logits = last_logits.as_ref().expect("prompt is non-empty");
        let next = greedy_argmax(logits);
        let new_logits = decode_step(&model, &mut st, next)?;
        println!("step {step}: token={next} logits={}", logits_digest(&new_logits));
        tokens.push(next);
        last_logits = Some(new_logits);
    }
    println!(
        "tokens: {}",
        tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}
