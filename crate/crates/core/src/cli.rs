//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::analysis::{
    export_tokens, item_tokens_and_vectors, param_count_report, prefix_similarity_table, prefix_table_tsv,
    read_tokens, write_tokens, EntityKind,
};
use crate::config::Config;
use crate::data::{parse_edges, Dataset, Modality};
use crate::error::{Error, Result};
use crate::fmat;
use crate::par;
use crate::stage1::{train_stage1, Stage1Model, TrainOptions};
use crate::stage2::{train_stage2, Stage2State};
use crate::synth::{generate, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(name = "preftok", version, about = "Multimodal preference tokens from interaction graphs")]
pub struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 forces sequential execution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Valid,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split interactions by time and write a dataset directory.
    Ingest {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features_v: PathBuf,
        #[arg(long)]
        features_t: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted-cluster dataset directory.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 8)]
        coarse: usize,
        #[arg(long, default_value_t = 1)]
        fine: usize,
        #[arg(long, default_value_t = 20)]
        per_user: usize,
        #[arg(long, default_value_t = 16)]
        dim_v: usize,
        #[arg(long, default_value_t = 32)]
        dim_t: usize,
    },
    /// Joint graph encoder and quantizer training.
    TrainStage1 {
        /// Profile name (desk, tiny, full) or config file.
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        freeze_items: bool,
        #[arg(long, value_enum)]
        rq_users: Option<Switch>,
        /// Score with continuous embeddings instead of reconstructions.
        #[arg(long)]
        continuous_scores: bool,
        /// Validation AUC after every epoch.
        #[arg(long)]
        eval: bool,
    },
    /// Write the token file of a stage-one checkpoint.
    ExportTokens {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity of items grouped by shared token prefixes.
    AnalyzePrefix {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Token file to group by (defaults to re-quantizing the checkpoint).
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, default_value = "v")]
        modality: Modality,
        /// Compare propagated embeddings instead of reconstructions.
        #[arg(long)]
        base_vectors: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reward-weighted codebook fine-tuning.
    TrainStage2 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sampled AUC of a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Trainable parameter counts.
    ReportParams {
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

/// Parses arguments and runs. Returns the process exit code: 0 on success
/// (including help), 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        par::set_threads(n);
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(spec: &str, overrides: &[String], seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::resolve(spec)?;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.stage1.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest {
            edges,
            features_v,
            features_t,
            out,
        } => {
            let set = parse_edges(edges)?;
            let ds = Dataset::new(&set, fmat::read(features_v)?, fmat::read(features_t)?)?;
            ds.save(out)?;
            println!(
                "users={} items={} train={} valid={} test={}",
                ds.user_count,
                ds.item_count,
                ds.split.train.len(),
                ds.split.valid.len(),
                ds.split.test.len()
            );
        }
        Command::GenerateSynthetic {
            out,
            users,
            items,
            coarse,
            fine,
            per_user,
            dim_v,
            dim_t,
        } => {
            let spec = SyntheticSpec {
                users: *users,
                items: *items,
                coarse_clusters: *coarse,
                fine_clusters: *fine,
                interactions_per_user: *per_user,
                dim_v: *dim_v,
                dim_t: *dim_t,
                seed: cli.seed.unwrap_or(0),
                ..SyntheticSpec::default()
            };
            let data = generate(&spec)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            crate::data::write_edges(&out.join("interactions.tsv"), &data.interactions)?;
            data.dataset()?.save(out)?;
            println!("wrote {} interactions to {}", data.interactions.len(), out.display());
        }
        Command::TrainStage1 {
            config,
            data,
            out,
            overrides,
            freeze_items,
            rq_users,
            continuous_scores,
            eval,
        } => {
            let mut cfg = load_config(config, overrides, cli.seed)?;
            cfg.stage1.freeze_items |= *freeze_items;
            if let Some(s) = rq_users {
                cfg.stage1.rq_users = *s == Switch::On;
            }
            if *continuous_scores {
                cfg.stage1.quantized_scores = false;
            }
            let ds = Dataset::load(data)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                eval_each_epoch: *eval,
            };
            let (model, report) = train_stage1(&ds, &cfg.stage1, &opts)?;
            if let Some(last) = report.epochs.last() {
                println!("epoch {} mean loss {:.6}", last.epoch, last.mean.total);
            }
            if let Some(auc) = model.evaluate_auc(&ds.split.valid)? {
                println!("valid AUC {auc:.4}");
            }
        }
        Command::ExportTokens { checkpoint, out } => {
            let model = Stage1Model::load(checkpoint)?;
            let records = export_tokens(&model)?;
            write_tokens(out, &records)?;
            info!("wrote {} token records", records.len());
        }
        Command::AnalyzePrefix {
            checkpoint,
            tokens,
            modality,
            base_vectors,
            out,
        } => {
            let model = Stage1Model::load(checkpoint)?;
            let (mut toks, vectors) = item_tokens_and_vectors(&model, *modality, *base_vectors)?;
            if let Some(path) = tokens {
                let recs = read_tokens(path, model.config.levels, model.config.codes)?;
                let mut from_file = vec![None; toks.len()];
                for r in recs.iter().filter(|r| r.kind == EntityKind::Item && r.modality == *modality) {
                    let slot = from_file
                        .get_mut(r.id as usize)
                        .ok_or_else(|| Error::Invalid(format!("item {} not in checkpoint", r.id)))?;
                    *slot = Some(r.sequence(model.config.codes)?);
                }
                toks = from_file
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| t.ok_or_else(|| Error::Invalid(format!("token file lacks item {i}"))))
                    .collect::<Result<_>>()?;
            }
            let rows = prefix_similarity_table(&toks, &vectors)?;
            write_or_print(out.as_deref(), &prefix_table_tsv(&rows))?;
        }
        Command::TrainStage2 {
            checkpoint,
            config,
            out,
            overrides,
        } => {
            let model = Stage1Model::load(checkpoint)?;
            let cfg = load_config(config, overrides, cli.seed)?;
            let seed = cli.seed.unwrap_or(model.config.seed);
            let mut state = Stage2State::from_stage1(&model, &cfg.stage2, seed)?;
            let report = train_stage2(&mut state, Some(out))?;
            let first = report.heldout.first().copied().unwrap_or(f64::NAN);
            let last = report.heldout.last().copied().unwrap_or(f64::NAN);
            println!("held-out reward {first:.6} -> {last:.6}");
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let model = Stage1Model::load(checkpoint)?;
            let ds = Dataset::load(data)?;
            let held = match split {
                SplitName::Valid => &ds.split.valid,
                SplitName::Test => &ds.split.test,
            };
            match model.evaluate_auc(held)? {
                Some(auc) => println!("AUC {auc:.6}"),
                None => return Err(Error::Invalid("no held-out edge has a user seen in training".into())),
            }
        }
        Command::ReportParams {
            config,
            overrides,
            json,
        } => {
            let cfg = load_config(config, overrides, cli.seed)?;
            let report = param_count_report(&cfg.stage1);
            if *json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                print!("{}", report.to_tsv());
            }
        }
    }
    Ok(())
}
