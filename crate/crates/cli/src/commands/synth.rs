use anyhow::Result;
use mealgen::recipe_data::Split;
use mealgen::synthbench::{build_benchmark, render_benchmark, Oracle, OracleConfig, OracleReport, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::args::SynthBuildArgs;
use crate::dataset::{Dataset, DatasetInfo, ORACLE_DIR};
use crate::rundir::{base_config, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthBuildConfig {
    pub benchmark: SynthConfig,
    pub train_oracle: bool,
    pub oracle: OracleConfig,
}

impl Default for SynthBuildConfig {
    fn default() -> Self {
        Self {
            benchmark: SynthConfig::default(),
            train_oracle: true,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct SynthStats {
    recipes: usize,
    train: usize,
    val: usize,
    test: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleReport>,
}

pub fn build(args: &SynthBuildArgs) -> Result<()> {
    let mut cfg: SynthBuildConfig = base_config(args.config.as_deref())?;
    if let Some(n) = args.recipes {
        cfg.benchmark.num_recipes = n;
    }
    if let Some(k) = args.glyphs {
        cfg.benchmark.num_glyphs = k;
    }
    if let Some(s) = args.image_size {
        cfg.benchmark.image_size = s;
    }
    if let Some(s) = args.seed {
        cfg.benchmark.seed = s;
        cfg.oracle.seed = s;
    }
    if let Some(e) = args.oracle_epochs {
        cfg.oracle.epochs = e;
    }
    if args.no_oracle {
        cfg.train_oracle = false;
    }
    cfg.oracle.render_size = cfg.benchmark.image_size;

    let run = RunDir::acquire(&args.out)?;
    run.write_config(&cfg)?;
    let manifest = build_benchmark(&cfg.benchmark)?;
    render_benchmark(&manifest, &cfg.benchmark, run.path())?;
    let info = DatasetInfo {
        images_root: ".".into(),
        synth: Some(cfg.benchmark.clone()),
    };
    Dataset::write(run.path(), &info, &manifest)?;
    log::info!("wrote {} recipes to {}", manifest.recipes.len(), run.path().display());

    let oracle = if cfg.train_oracle {
        let (oracle, report) = Oracle::train(cfg.benchmark.num_glyphs, cfg.oracle.clone())?;
        oracle.save(&run.join(ORACLE_DIR))?;
        log::info!("oracle held-out exact match {:.3}", report.heldout_exact_match);
        Some(report)
    } else {
        None
    };
    let count = |s: Split| manifest.recipes.iter().filter(|r| r.split == Some(s)).count();
    run.write_json(
        "stats.json",
        &SynthStats {
            recipes: manifest.recipes.len(),
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
            oracle,
        },
    )
}
