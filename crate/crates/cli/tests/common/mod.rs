#![allow(dead_code)]

use std::path::Path;

use drum_cli::ExperimentConfig;

/// Tiny networks and schedules so every method trains in well under a
/// second on a few hundred rows.
pub const FAST_PROFILE: &str = r#"
[profile]
erm = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
classify = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
pl_mean_erm = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
pl_mice_erm = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
pl_mf_erm = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
dro.net = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
kmm.net = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
pl_mean_dro.net = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
pl_mice_dro.net = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
pl_mf_dro.net = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
drum.outcome = { hidden = [16], train = { lr = 3e-3, epochs = 5 } }
drum.worstcase = { hidden = [8], latent_dim = 2, mc_samples = 8, train = { lr = 1e-3, epochs = 2 } }
drum.engression = { hidden = [8], noise_dim = 2, train = { lr = 1e-3, epochs = 3 } }
drum.constrained = { iterations = 3, mc_samples = 8 }
debias.folds = 2
debias.mc_samples = 8
debias.outcome = { hidden = [8], train = { lr = 3e-3, epochs = 3 } }
debias.ratio = { hidden = [8], train = { lr = 3e-3, epochs = 3 } }
debias.unconstrained.schedule = { epochs = 1 }
debias.conditional.schedule = { steps = 3 }
debias.final_model = { hidden = [8], train = { lr = 3e-3, epochs = 3 } }
"#;

/// A small Setting-II experiment with the fast profile; `overrides` are
/// `key=value` settings applied on top.
pub fn small_config(overrides: &[&str]) -> ExperimentConfig {
    let text = format!(
        "name = \"small\"\nscales = [0.6]\nmc_sets = 2\n[simulation]\nsetting = \"II\"\nn = 300\nn_target = 200\n{FAST_PROFILE}"
    );
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::parse(&text, &o).expect("config parses")
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Rewrites a CSV through `f(header, row) -> (header, row)` applied per line.
pub fn map_csv(src: &Path, dst: &Path, f: impl Fn(usize, Vec<String>) -> Vec<String>) {
    let text = String::from_utf8(read(src)).unwrap();
    let out: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, line)| f(i, line.split(',').map(String::from).collect()).join(","))
        .collect();
    write(dst, &(out.join("\n") + "\n"));
}

/// `[data]` section for files written by `simulate` (Setting II: 15 X, 2 A).
pub fn data_section(source: &Path, target: &Path, task: &str, extra_columns: &str) -> String {
    let mut cols = String::new();
    for i in 1..=15 {
        cols.push_str(&format!("x{i} = \"stable_x\"\n"));
    }
    cols.push_str("a1 = \"missing_a\"\na2 = \"missing_a\"\ny = \"outcome_y\"\n");
    cols.push_str(extra_columns);
    format!(
        "[data]\nsource = {:?}\ntarget = {:?}\n[data.schema]\ntask = \"{task}\"\n[data.schema.columns]\n{cols}",
        source.display().to_string(),
        target.display().to_string()
    )
}

pub fn data_config(source: &Path, target: &Path, task: &str, extra_columns: &str) -> ExperimentConfig {
    let text = format!(
        "name = \"csv\"\n{}\n{FAST_PROFILE}",
        data_section(source, target, task, extra_columns)
    );
    ExperimentConfig::parse(&text, &[]).expect("config parses")
}
