//! Comparison tables over the eval reports in one directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{output_dir, ReportArgs};
use crate::artifact;
use crate::error::{Error, Result};
use crate::evaluation::{ClassMetrics, EvalReport, Protocol};

const SUFFIX: &str = ".eval.json";

#[derive(Debug, Serialize)]
struct Row {
    method: String,
    accuracy: f64,
    config_hash: Option<String>,
    per_class: Vec<ClassMetrics>,
}

#[derive(Debug, Serialize)]
struct Table {
    protocol: Protocol,
    split_hash: Option<String>,
    rows: Vec<Row>,
}

#[derive(Debug, Serialize)]
struct Summary {
    config_hash: String,
    tables: Vec<Table>,
}

fn protocol_label(p: Protocol) -> &'static str {
    match p {
        Protocol::Instance => "instance",
        Protocol::BookInstance => "book_instance",
        Protocol::Book => "book",
    }
}

/// `(method, report)` for every `<method>.<protocol>.eval.json` in `dir`,
/// sorted by file name.
fn collect(dir: &Path) -> Result<Vec<(String, EvalReport)>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(SUFFIX))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!(
            "{}: no `*{SUFFIX}` reports; run `eval` or `eval-books` first",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|path| {
            let report = EvalReport::load(path)?;
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let stem = &name[..name.len() - SUFFIX.len()];
            let method = stem
                .strip_suffix(&format!(".{}", protocol_label(report.protocol)))
                .unwrap_or(stem);
            Ok((method.to_string(), report))
        })
        .collect()
}

fn markdown(tables: &[Table]) -> String {
    let mut md = String::new();
    for t in tables {
        let _ = writeln!(md, "## {} protocol\n", protocol_label(t.protocol));
        let _ = writeln!(md, "| method | accuracy |\n|---|---|");
        for r in &t.rows {
            let _ = writeln!(md, "| {} | {:.4} |", r.method, r.accuracy);
        }
        let _ = writeln!(md);
        for r in &t.rows {
            let _ = writeln!(
                md,
                "### {} per class\n\n| class | F1 | accuracy | support |\n|---|---|---|---|",
                r.method
            );
            for c in &r.per_class {
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {:.4} | {} |",
                    c.id, c.f1, c.acc, c.support
                );
            }
            let _ = writeln!(md);
        }
    }
    md
}

pub(super) fn run(a: &ReportArgs) -> Result<()> {
    let reports = collect(&a.dir)?;
    let mut by_protocol: BTreeMap<&'static str, Vec<(String, EvalReport)>> = BTreeMap::new();
    for (method, r) in reports {
        by_protocol
            .entry(protocol_label(r.protocol))
            .or_default()
            .push((method, r));
    }
    let mut tables = Vec::new();
    for (label, group) in by_protocol {
        let hashes: std::collections::BTreeSet<Option<&str>> =
            group.iter().map(|(_, r)| r.split_hash.as_deref()).collect();
        if hashes.len() > 1 && !a.force {
            let listed: Vec<String> = group
                .iter()
                .map(|(m, r)| format!("{m}={}", r.split_hash.as_deref().unwrap_or("none")))
                .collect();
            return Err(Error::data(format!(
                "{label} reports come from different splits ({}); pass --force to compare anyway",
                listed.join(", ")
            )));
        }
        let protocol = group[0].1.protocol;
        let split_hash = if hashes.len() == 1 {
            group[0].1.split_hash.clone()
        } else {
            None
        };
        let rows = group
            .into_iter()
            .map(|(method, r)| Row {
                method,
                accuracy: r.accuracy,
                config_hash: r.config_hash,
                per_class: r.per_class,
            })
            .collect();
        tables.push(Table {
            protocol,
            split_hash,
            rows,
        });
    }
    let out = output_dir(a.out.as_deref().unwrap_or(&a.dir));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let summary = Summary {
        config_hash: super::commands::hash_of("report", a),
        tables,
    };
    artifact::write_json(&out.join("report.json"), &summary)?;
    let md = markdown(&summary.tables);
    artifact::write_bytes(&out.join("report.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}
