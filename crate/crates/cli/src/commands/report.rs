use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use anyhow::Result;
use mealgen::retrieval::CrossModalReport;

use super::assoc::RetrievalReport;
use super::gan::{run_name, GanQuality};
use crate::args::ReportArgs;
use crate::rundir::read_json;

/// Median rank reported for random retrieval over a pool.
pub fn random_row_medr(pool_size: usize) -> f64 {
    pool_size as f64 / 2.0
}

#[derive(Debug, Default)]
pub struct Tables {
    pub retrieval: Vec<(String, usize, CrossModalReport)>,
    pub quality: Vec<(String, GanQuality)>,
    pub missing: Vec<String>,
}

fn eval_files(dir: &Path, prefix: &str) -> Vec<std::path::PathBuf> {
    let mut files: Vec<_> = std::fs::read_dir(dir.join("eval"))
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with(prefix) && name.ends_with(".json")
        })
        .collect();
    files.sort();
    files
}

pub fn collect(runs: &[std::path::PathBuf]) -> Result<Tables> {
    let mut t = Tables::default();
    for dir in runs {
        let name = run_name(dir);
        let retrieval = eval_files(dir, "retrieval_");
        let quality = eval_files(dir, "quality_");
        if retrieval.is_empty() && quality.is_empty() {
            t.missing.push(format!("{name}: no metrics under {}", dir.join("eval").display()));
        }
        for f in retrieval {
            let r: RetrievalReport = read_json(&f)?;
            for p in r.pools {
                t.retrieval.push((format!("{name} [{}]", r.split), p.pool_size, p.model));
            }
        }
        for f in quality {
            let q: GanQuality = read_json(&f)?;
            if q.quality.is_none() {
                t.missing.push(format!("{name}: IS/FID not computed (no feature extractor)"));
            }
            t.quality.push((name.clone(), q));
        }
    }
    Ok(t)
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "-".into())
}

pub fn render(t: &Tables) -> String {
    let mut out = String::new();
    let mut by_pool: BTreeMap<usize, Vec<(String, CrossModalReport)>> = BTreeMap::new();
    for (name, pool, r) in &t.retrieval {
        by_pool.entry(*pool).or_default().push((name.clone(), r.clone()));
    }
    for (pool, rows) in by_pool {
        let _ = writeln!(out, "Retrieval, pool {pool}");
        out.push_str(&mealgen::retrieval::format_retrieval_table(&rows));
        out.push('\n');
    }
    if !t.quality.is_empty() {
        let _ = writeln!(out, "Image quality");
        let _ = writeln!(out, "{:<16} {:<24} {:>10} {:>10}", "category", "model", "IS", "FID");
        for (name, q) in &t.quality {
            let (cat, is, fid) = match &q.quality {
                Some(r) => (r.category.clone(), format!("{:.3}±{:.3}", r.is_mean, r.is_std), format!("{:.3}", r.fid)),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(out, "{cat:<16} {name:<24} {is:>10} {fid:>10}");
        }
        out.push('\n');

        // Fake-image-to-recipe MedR, one column per category.
        let mut categories: Vec<String> = t
            .quality
            .iter()
            .map(|(_, q)| q.quality.as_ref().map(|r| r.category.clone()).unwrap_or_else(|| "all".into()))
            .collect();
        categories.sort();
        categories.dedup();
        let _ = write!(out, "{:<28}", "fake->recipe MedR");
        for c in &categories {
            let _ = write!(out, " {c:>12}");
        }
        out.push('\n');
        let pool = t.quality[0].1.fake2recipe.pool_size;
        let _ = write!(out, "{:<28}", format!("random (pool {pool})"));
        for _ in &categories {
            let _ = write!(out, " {:>12.1}", random_row_medr(pool));
        }
        out.push('\n');
        for (name, q) in &t.quality {
            let cat = q.quality.as_ref().map(|r| r.category.clone()).unwrap_or_else(|| "all".into());
            let _ = write!(out, "{:<28}", format!("{name} (cycle {})", q.cycle_weight));
            for c in &categories {
                let v = (c == &cat).then_some(q.fake2recipe.medr_mean);
                let _ = write!(out, " {:>12}", cell(v, 2));
            }
            out.push('\n');
        }
        if t.quality.iter().any(|(_, q)| q.oracle_f1.is_some()) {
            out.push('\n');
            let _ = writeln!(out, "{:<28} {:>10} {:>10}", "oracle F1", "paired", "shuffled");
            for (name, q) in &t.quality {
                let _ = writeln!(
                    out,
                    "{:<28} {:>10} {:>10}",
                    name,
                    cell(q.oracle_f1, 3),
                    cell(q.oracle_f1_shuffled, 3)
                );
            }
        }
        out.push('\n');
    }
    if !t.missing.is_empty() {
        let _ = writeln!(out, "Missing metrics");
        for m in &t.missing {
            let _ = writeln!(out, "  {m}");
        }
    }
    out
}

pub fn run(args: &ReportArgs) -> Result<String> {
    let text = render(&collect(&args.runs)?);
    if let Some(path) = &args.out {
        std::fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_row_convention() {
        assert_eq!(random_row_medr(900), 450.0);
    }

    #[test]
    fn missing_metrics_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let t = collect(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(t.missing.len(), 1);
        assert!(render(&t).contains("Missing metrics"));
    }
}
