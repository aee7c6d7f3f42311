use std::path::Path;

use anyhow::{bail, Result};
use candle_core::Tensor;
use mealgen::imaging::{grid, save_png, tensor_to_images};
use mealgen::recipe_data::Recipe;

use super::gan::{noise, scale_rows, GanRun, GridSidecar};
use crate::args::{GridFixedCArgs, GridFixedZArgs};
use crate::rundir::write_json;

fn sidecar_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("json")
}

fn presence(run: &GanRun, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(match run.oracle(None)? {
        Some(o) => o.presence(images)?,
        None => Vec::new(),
    })
}

/// One row per recipe: the three scales under a shared noise vector.
pub fn fixed_z(args: &GridFixedZArgs) -> Result<GridSidecar> {
    if args.recipes.len() < 2 {
        bail!("a fixed-z grid needs at least two recipes");
    }
    let run = GanRun::open(&args.run)?;
    let recipes: Vec<&Recipe> = args
        .recipes
        .iter()
        .map(|id| run.assoc.data.find(id))
        .collect::<Result<_>>()?;
    let n = recipes.len();
    let p = run.encode(&recipes)?;
    let z = noise(args.z_seed, 1, run.gan.config().z_dim)?.repeat((n, 1))?;
    let out = run.gan.generate_eval(&p, &z)?;
    let size = run.gan.config().scales()[2];
    let by_scale = scale_rows(&out, size)?;
    let rows: Vec<Vec<image::RgbImage>> = (0..n)
        .map(|i| by_scale.iter().map(|row| row[i].clone()).collect())
        .collect();
    save_png(&grid(&rows, 2)?, &args.out)?;
    let sidecar = GridSidecar {
        recipe_ids: args.recipes.clone(),
        z_seed: args.z_seed,
        scales: run.gan.config().scales().to_vec(),
        step: None,
        oracle_presence: presence(&run, &out[2])?,
    };
    write_json(&sidecar_path(&args.out), &sidecar)?;
    Ok(sidecar)
}

/// One recipe under `num_z` noise vectors, at the largest scale.
pub fn fixed_c(args: &GridFixedCArgs) -> Result<GridSidecar> {
    if args.num_z == 0 {
        bail!("num_z must be at least 1");
    }
    let run = GanRun::open(&args.run)?;
    let recipe = run.assoc.data.find(&args.recipe)?;
    let p = run.encode(&[recipe])?.repeat((args.num_z, 1))?;
    let z = noise(args.z_seed, args.num_z, run.gan.config().z_dim)?;
    let images = run.generate(&p, &z)?;
    save_png(&grid(&[tensor_to_images(&images)?], 2)?, &args.out)?;
    let sidecar = GridSidecar {
        recipe_ids: vec![args.recipe.clone(); args.num_z],
        z_seed: args.z_seed,
        scales: vec![run.gan.config().scales()[2]],
        step: None,
        oracle_presence: presence(&run, &images)?,
    };
    write_json(&sidecar_path(&args.out), &sidecar)?;
    Ok(sidecar)
}
