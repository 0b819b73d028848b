use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use neuron_lens::metrics::{metric_suite, MaskedSet};
use neuron_lens::{
    cluster_thresholds, explain_neurons, ActivationArchive, ConceptStore, ExplanationRecord, Formula, KMeansConfig,
    RangeMasks, RangeMode, SearchConfig,
};

use crate::error::CliError;
use crate::manifest::{InputDigest, RunManifest};
use crate::{ClusterArgs, ExplainArgs, MetricsArgs};

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::io(p.display(), e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_lines(path: Option<&Path>, lines: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let target = path.map_or_else(|| "standard output".to_string(), |p| p.display().to_string());
    let mut out = open_output(path)?;
    for line in lines {
        writeln!(out, "{line}").map_err(|e| CliError::io(&target, e))?;
    }
    out.flush().map_err(|e| CliError::io(&target, e))
}

/// Parses `all` or a list like `0,2,5-9` into sorted, de-duplicated indices.
pub fn parse_neurons(spec: &str, n_neurons: usize) -> Result<Vec<usize>, CliError> {
    if spec.trim() == "all" {
        return Ok((0..n_neurons).collect());
    }
    let bad = |part: &str| CliError::validation(format!("invalid neuron list entry `{part}`"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().parse().map_err(|_| bad(part))?;
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if out.is_empty() {
        return Err(CliError::validation("no neurons selected"));
    }
    out.sort_unstable();
    out.dedup();
    if let Some(&n) = out.iter().find(|&&n| n >= n_neurons) {
        return Err(CliError::validation(format!("neuron {n} out of range ({n_neurons} neurons)")));
    }
    Ok(out)
}

/// `*.nlaa` files of a masked-activation directory, sorted by path.
fn masked_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir.display(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "nlaa"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_masked_dir(dir: &Path) -> Result<MaskedSet, CliError> {
    let mut set = MaskedSet::new();
    for p in masked_files(dir)? {
        set.insert(ActivationArchive::load(&p)?);
    }
    Ok(set)
}

fn load_masked(dir: Option<&Path>) -> Result<Option<MaskedSet>, CliError> {
    dir.map(load_masked_dir).transpose()
}

pub fn cluster(args: ClusterArgs) -> Result<(), CliError> {
    if args.clusters == 0 {
        return Err(CliError::validation("--clusters must be at least 1"));
    }
    let archive = ActivationArchive::load(&args.activations)?;
    let neurons: Vec<usize> = match args.neuron {
        Some(n) if n >= archive.n_neurons() => {
            return Err(CliError::validation(format!("neuron {n} out of range ({} neurons)", archive.n_neurons())))
        }
        Some(n) => vec![n],
        None => (0..archive.n_neurons()).collect(),
    };
    let lines = neurons
        .into_iter()
        .map(|n| {
            let set = cluster_thresholds(&archive, n, args.clusters, args.seed, KMeansConfig::default())
                .map_err(|e| CliError::validation(format!("neuron {n}: {e}")))?;
            Ok(serde_json::to_string(&set).expect("cluster sets serialize"))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_lines(args.output.as_deref(), lines)
}

pub fn explain(args: ExplainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    if let Some(q) = args.legacy_quantile {
        if !(q > 0.0 && q < 1.0) {
            return Err(CliError::validation(format!("--legacy-quantile must lie in (0, 1), got {q}")));
        }
    }
    let threads = match args.threads {
        Some(0) => return Err(CliError::validation("--threads must be at least 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let cfg = SearchConfig {
        beam_width: args.beam_width,
        max_arity: args.max_arity,
        heuristic: args.heuristic,
        objective: args.objective,
        n_cls: args.clusters,
        seed: args.seed,
        kmeans: KMeansConfig::default(),
    };
    cfg.validate()?;

    let archive = ActivationArchive::load(&args.activations)?;
    let store = ConceptStore::load(&args.concepts)?;
    store.check_compatible(&archive)?;
    let masked = load_masked(args.masked_activations.as_deref())?;
    let neurons = parse_neurons(&args.neurons, archive.n_neurons())?;
    let mode = args.legacy_quantile.map_or(RangeMode::Clustered, RangeMode::TopQuantile);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::validation(format!("cannot start {threads} worker threads: {e}")))?;
    let records = pool.install(|| explain_neurons(&archive, &store, &neurons, mode, &cfg, masked.as_ref()))?;
    let n_records = records.len();
    let timings = args.timings;
    write_lines(
        args.output.as_deref(),
        records.into_iter().map(|r| if timings { r } else { r.without_timing() }).map(|r| r.to_json_line()),
    )?;

    let mut inputs = vec![InputDigest::of(&args.activations)?, InputDigest::of(&args.concepts)?];
    if let Some(dir) = &args.masked_activations {
        for f in masked_files(dir)? {
            inputs.push(InputDigest::of(&f)?);
        }
    }
    let manifest_path = args.manifest.clone().or_else(|| {
        args.output.as_ref().map(|o| {
            let mut s = o.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        })
    });
    let manifest = RunManifest {
        engine: "neuron-lens",
        engine_version: neuron_lens::VERSION,
        command: "explain",
        config: &args,
        threads,
        inputs,
        records: n_records,
        wall_time_ms: start.elapsed().as_millis() as u64,
    };
    match manifest_path {
        Some(p) => fs::write(&p, manifest.to_json() + "\n").map_err(|e| CliError::io(p.display(), e)),
        None => {
            eprintln!("{}", manifest.to_json());
            Ok(())
        }
    }
}

pub fn metrics(args: MetricsArgs) -> Result<(), CliError> {
    let archive = ActivationArchive::load(&args.activations)?;
    let store = ConceptStore::load(&args.concepts)?;
    store.check_compatible(&archive)?;
    let masked = load_masked(args.masked_activations.as_deref())?;
    let file = File::open(&args.record).map_err(|e| CliError::io(args.record.display(), e))?;

    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(args.record.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| CliError::validation(format!("{}:{}: {e}", args.record.display(), i + 1));
        let record: ExplanationRecord = serde_json::from_str(&line).map_err(|e| at(&e))?;
        if record.neuron >= archive.n_neurons() {
            return Err(at(&format!("neuron {} out of range", record.neuron)));
        }
        let formula = Formula::parse(&record.formula, store.labels()).map_err(|e| at(&e))?;
        let range = RangeMasks::new(&archive, record.neuron, record.interval()).map_err(|e| at(&e))?;
        let suite =
            metric_suite(&formula, &range, &store, record.neuron, &archive, masked.as_ref()).map_err(|e| at(&e))?;
        lines.push(serde_json::to_string(&suite).expect("metric suites serialize"));
    }
    write_lines(args.output.as_deref(), lines)
}

#[cfg(test)]
mod tests {
    use super::parse_neurons;

    #[test]
    fn neuron_lists() {
        assert_eq!(parse_neurons("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_neurons("4, 0-2,1", 5).unwrap(), vec![0, 1, 2, 4]);
        assert!(parse_neurons("5", 5).is_err());
        assert!(parse_neurons("3-1", 5).is_err());
        assert!(parse_neurons("x", 5).is_err());
        assert!(parse_neurons("", 5).is_err());
    }
}
