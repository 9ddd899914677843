use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use pcnet::dataset::{load_csv_with, standardize};
use pcnet::knn::{run_experiment, DistanceContext, ExperimentConfig, Table1Row, DEFAULT_FOLD_SEED, DEFAULT_K_GRID};
use pcnet::partialcorr::{network_asymmetric, network_geometric, residual_scales, stream_edges};
use pcnet::regpinv::{compute_svd, filter_factors, write_svd_cache};
use pcnet::resolution::ResolutionOperator;
use pcnet::{
    Dataset, DistanceSpec, LoadOptions, Metric, NetworkForm, Orientation, PcnError, PcnMode, RegularizationSpec,
    SignConvention, StandardizeOptions,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "pcnet", version, about = "Partial correlation networks through the resolution matrix")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the partial correlation network.
    Network(NetworkArgs),
    /// Spectral embedding rows or a pairwise distance matrix.
    Embed(EmbedArgs),
    /// Cross-validated k-NN with standard and network distances.
    Knn(KnnArgs),
    /// Write the thin SVD (and filter factors, if a regularization is given).
    SvdCache(SvdCacheArgs),
}

#[derive(Args, Debug, Serialize)]
struct InputArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Column holding class labels; excluded from the numeric data.
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long, value_enum, default_value_t = OrientationArg::SamplesAsRows)]
    orientation: OrientationArg,
    /// Skip z-scoring features before transposing (samples-as-columns only).
    #[arg(long)]
    no_prestandardize: bool,
    /// Leave the engine columns unscaled.
    #[arg(long)]
    no_standardize_columns: bool,
    /// Drop records with missing cells instead of failing.
    #[arg(long)]
    drop_incomplete_rows: bool,
    /// Expand non-numeric columns into indicator columns.
    #[arg(long)]
    one_hot: bool,
}

impl InputArgs {
    fn load(&self) -> pcnet::Result<(pcnet::RawTable, Dataset)> {
        let table = load_csv_with(
            &self.input,
            &LoadOptions {
                label_column: self.label_column.clone(),
                drop_incomplete_rows: self.drop_incomplete_rows,
                one_hot: self.one_hot,
            },
        )?;
        let data = standardize(&table, self.standardize_options())?;
        Ok((table, data))
    }

    fn standardize_options(&self) -> StandardizeOptions {
        StandardizeOptions {
            orientation: self.orientation.into(),
            prestandardize_features: !self.no_prestandardize,
            standardize_columns: !self.no_standardize_columns,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[group(multiple = false)]
struct RegArgs {
    /// Ridge penalty λ ≥ 0
    #[arg(long)]
    ridge: Option<f64>,
    /// Keep the leading r singular components
    #[arg(long)]
    svd_rank: Option<usize>,
    /// Keep singular components with σ above this value
    #[arg(long)]
    svd_threshold: Option<f64>,
}

impl RegArgs {
    fn spec(&self) -> Option<RegularizationSpec> {
        match (self.ridge, self.svd_rank, self.svd_threshold) {
            (Some(l), _, _) => Some(RegularizationSpec::Ridge(l)),
            (_, Some(r), _) => Some(RegularizationSpec::SvdRank(r)),
            (_, _, Some(t)) => Some(RegularizationSpec::SvdThreshold(t)),
            _ => None,
        }
    }

    fn required(&self) -> pcnet::Result<RegularizationSpec> {
        self.spec().ok_or_else(|| {
            PcnError::InvalidRegularization("one of --ridge, --svd-rank, --svd-threshold is required".into())
        })
    }
}

#[derive(Args, Debug, Serialize)]
struct OutputArgs {
    /// Output file; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
    /// Refuse to build dense n×n outputs above this many nodes.
    #[arg(long, default_value_t = pcnet::DEFAULT_N_LIMIT)]
    n_limit: usize,
}

#[derive(Args, Debug, Serialize)]
struct NetworkArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    reg: RegArgs,
    #[arg(long, value_enum, default_value_t = FormArg::Asymmetric)]
    form: FormArg,
    #[arg(long, value_enum, default_value_t = SignArg::AsWritten)]
    sign_convention: SignArg,
    /// Only emit edges with |weight| at or above this value.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::EdgesCsv)]
    format: FormatArg,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct EmbedArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// `spectral` writes embedding rows; any other metric writes distances.
    #[arg(long, value_enum, default_value_t = EmbedMetric::Spectral)]
    metric: EmbedMetric,
    #[arg(long, value_enum, default_value_t = FormArg::Asymmetric)]
    form: FormArg,
    /// Re-check that embedding distances equal resolution distances.
    #[arg(long)]
    self_check: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct KnnArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Name used in the report and summary row; defaults to the file stem.
    #[arg(long)]
    dataset_name: Option<String>,
    /// Comma-separated neighbor counts.
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    /// Comma-separated settings such as `ridge:0.1,rank:8`.
    #[arg(long, value_delimiter = ',')]
    reg_grid: Option<Vec<String>>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = DEFAULT_FOLD_SEED)]
    seed: u64,
    /// Network metric compared against the standard one.
    #[arg(long, value_enum, default_value_t = KnnMetric::PcnExact)]
    metric: KnnMetric,
    /// Network forms searched for the network metric.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FormArg::Asymmetric, FormArg::Geometric])]
    form: Vec<FormArg>,
    #[arg(long, value_enum, default_value_t = SignArg::AsWritten)]
    sign_convention: SignArg,
    /// Also center and scale each sample column after transposing.
    #[arg(long)]
    standardize_samples: bool,
    /// Output prefix: writes `<prefix>.json` and `<prefix>.csv`.
    #[arg(long)]
    #[serde(skip)]
    output: PathBuf,
    #[arg(long, default_value_t = pcnet::DEFAULT_N_LIMIT)]
    n_limit: usize,
}

#[derive(Args, Debug, Serialize)]
struct SvdCacheArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    reg: RegArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OrientationArg {
    SamplesAsRows,
    SamplesAsColumns,
}

impl From<OrientationArg> for Orientation {
    fn from(o: OrientationArg) -> Self {
        match o {
            OrientationArg::SamplesAsRows => Orientation::SamplesAsRows,
            OrientationArg::SamplesAsColumns => Orientation::SamplesAsColumns,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FormArg {
    Asymmetric,
    Geometric,
}

impl From<FormArg> for NetworkForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Asymmetric => NetworkForm::Asymmetric,
            FormArg::Geometric => NetworkForm::Geometric,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SignArg {
    AsWritten,
    Negated,
}

impl From<SignArg> for SignConvention {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::AsWritten => SignConvention::AsWritten,
            SignArg::Negated => SignConvention::Negated,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FormatArg {
    EdgesCsv,
    DenseCsv,
    FactoredBin,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EmbedMetric {
    Spectral,
    StandardEuclidean,
    Resolution,
    PcnExact,
    PcnApprox,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum KnnMetric {
    PcnExact,
    PcnApprox,
}

/// Provenance carried by every output.
#[derive(Clone, Serialize)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl Provenance {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        let json = serde_json::to_string(&(command, config)).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        Self {
            tool: "pcnet",
            version: VERSION,
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
        }
    }

    fn csv_comment(&self) -> String {
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        format!("# pcnet {} config={} seed={}\n", self.version, self.config_hash, seed)
    }
}

#[derive(Serialize)]
struct Summary {
    min: f64,
    max: f64,
    mean: f64,
}

impl Summary {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        Some(Self {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    command: &'a str,
    output: String,
    format: Option<FormatArg>,
    m: usize,
    n: usize,
    numerical_rank: usize,
    reg: Option<RegularizationSpec>,
    form: Option<NetworkForm>,
    sign_convention: Option<SignConvention>,
    diag_r: Option<Summary>,
    d: Option<Summary>,
    degenerate_columns: usize,
    self_check_max_error: Option<f64>,
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn create(path: &Path) -> pcnet::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> PcnError {
    PcnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> pcnet::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn write_dense_csv(path: &Path, prov: &Provenance, names: &[String], m: &DMatrix<f64>) -> pcnet::Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        w.write_all(prov.csv_comment().as_bytes())?;
        writeln!(w, "{}", names.join(","))?;
        for row in m.row_iter() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

fn cmd_network(args: &NetworkArgs) -> pcnet::Result<()> {
    let (_, data) = args.input.load()?;
    let reg = args.reg.required()?;
    let form: NetworkForm = args.form.into();
    let convention: SignConvention = args.sign_convention.into();
    let svd = Arc::new(compute_svd(&data)?);
    let op = ResolutionOperator::new(Arc::clone(&svd), reg)?;
    let scales = residual_scales(&op)?;
    let prov = Provenance::new("network", args, None);
    let path = &args.out.output;

    match args.format {
        FormatArg::EdgesCsv => {
            let mut w = create(path)?;
            w.write_all(prov.csv_comment().as_bytes())
                .and_then(|_| writeln!(w, "source,target,weight"))
                .map_err(|e| io_err(path, e))?;
            stream_edges(&op, &scales, form, convention, args.threshold, |edges| {
                for e in edges {
                    writeln!(w, "{},{},{:e}", data.names[e.i], data.names[e.j], e.weight)
                        .map_err(|err| io_err(path, err))?;
                }
                Ok(())
            })?;
            w.flush().map_err(|e| io_err(path, e))?;
        }
        FormatArg::DenseCsv | FormatArg::Json => {
            let net = match form {
                NetworkForm::Asymmetric => network_asymmetric(&op, scales.clone(), convention, args.out.n_limit)?,
                NetworkForm::Geometric => network_geometric(&op, scales.clone(), convention, args.out.n_limit)?,
            };
            if args.format == FormatArg::DenseCsv {
                write_dense_csv(path, &prov, &data.names, &net.weights)?;
            } else {
                #[derive(Serialize)]
                struct NetworkJson<'a> {
                    #[serde(flatten)]
                    provenance: &'a Provenance,
                    nodes: &'a [String],
                    /// `weights[i][j] = P_ij`; column `j` is node `j`'s network column.
                    weights: Vec<Vec<f64>>,
                }
                let weights = net.weights.row_iter().map(|r| r.iter().copied().collect()).collect();
                write_json(
                    path,
                    &NetworkJson {
                        provenance: &prov,
                        nodes: &data.names,
                        weights,
                    },
                )?;
            }
        }
        FormatArg::FactoredBin => {
            let mut w = create(path)?;
            write_svd_cache(&mut w, &svd, Some(op.filters()))
                .and_then(|_| w.flush())
                .map_err(|e| io_err(path, e))?;
        }
    }

    write_json(
        &sidecar_path(path),
        &Sidecar {
            provenance: &prov,
            command: "network",
            output: path.display().to_string(),
            format: Some(args.format),
            m: data.m(),
            n: data.n(),
            numerical_rank: svd.numerical_rank,
            reg: Some(reg),
            form: Some(form),
            sign_convention: Some(convention),
            diag_r: Summary::of(op.diagonal().iter().copied()),
            d: Summary::of(scales.d.iter().copied()),
            degenerate_columns: scales.degenerate.iter().filter(|&&x| x).count(),
            self_check_max_error: None,
        },
    )
}

fn cmd_embed(args: &EmbedArgs) -> pcnet::Result<()> {
    let (_, data) = args.input.load()?;
    let prov = Provenance::new("embed", args, None);
    let path = &args.out.output;
    let reg = args.reg.spec();
    let svd = Arc::new(compute_svd(&data)?);
    let op = reg.map(|r| ResolutionOperator::new(Arc::clone(&svd), r)).transpose()?;

    if args.metric == EmbedMetric::Spectral {
        let op = op.as_ref().ok_or_else(|| {
            PcnError::EmbeddingNeedsTruncation("no regularization (pass --svd-rank or --svd-threshold)".into())
        })?;
        let emb = op.spectral_embedding()?;
        let header: Vec<String> = (0..emb.ncols()).map(|k| format!("dim{k}")).collect();
        let mut w = create(path)?;
        let res = (|| -> std::io::Result<()> {
            w.write_all(prov.csv_comment().as_bytes())?;
            writeln!(w, "node,{}", header.join(","))?;
            for (i, row) in emb.row_iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                writeln!(w, "{},{}", data.names[i], cells.join(","))?;
            }
            w.flush()
        })();
        res.map_err(|e| io_err(path, e))?;
    } else {
        let metric = match args.metric {
            EmbedMetric::StandardEuclidean => Metric::StandardEuclidean,
            EmbedMetric::Resolution => Metric::Resolution,
            EmbedMetric::PcnExact => Metric::PcnExact,
            EmbedMetric::PcnApprox => Metric::PcnApprox,
            EmbedMetric::Spectral => unreachable!(),
        };
        let spec = DistanceSpec {
            metric,
            reg,
            form: args.form.into(),
            sign_convention: SignConvention::default(),
        };
        let ctx = DistanceContext::new(&data, Some(&svd), spec)?;
        write_dense_csv(path, &prov, &data.names, &ctx.distance_matrix(args.out.n_limit)?)?;
    }

    let self_check_max_error = if args.self_check {
        Some(self_check(&data, op.as_ref(), args.out.n_limit)?)
    } else {
        None
    };

    let scales = match (&op, args.metric) {
        (Some(op), EmbedMetric::PcnExact | EmbedMetric::PcnApprox) => Some(residual_scales(op)?),
        _ => None,
    };
    write_json(
        &sidecar_path(path),
        &Sidecar {
            provenance: &prov,
            command: "embed",
            output: path.display().to_string(),
            format: None,
            m: data.m(),
            n: data.n(),
            numerical_rank: svd.numerical_rank,
            reg,
            form: matches!(args.metric, EmbedMetric::PcnExact | EmbedMetric::PcnApprox).then(|| args.form.into()),
            sign_convention: None,
            diag_r: op.as_ref().and_then(|o| Summary::of(o.diagonal().iter().copied())),
            d: scales.as_ref().and_then(|s| Summary::of(s.d.iter().copied())),
            degenerate_columns: data.n_degenerate(),
            self_check_max_error,
        },
    )
}

/// Tolerance for embedding-row distances against resolution distances.
const SELF_CHECK_TOL: f64 = 1e-10;

/// Max deviation between embedding-row distances and resolution distances;
/// errors when it exceeds [`SELF_CHECK_TOL`].
fn self_check(data: &Dataset, op: Option<&ResolutionOperator>, n_limit: usize) -> pcnet::Result<f64> {
    let op = op.filter(|o| o.reg().is_truncation()).ok_or_else(|| {
        let got = op.map_or("no regularization".to_string(), |o| o.reg().to_string());
        PcnError::EmbeddingNeedsTruncation(format!("{got} (--self-check compares against a truncated embedding)"))
    })?;
    let n = data.n();
    if n > n_limit {
        return Err(PcnError::MaterializationLimit { n, limit: n_limit });
    }
    let emb = op.spectral_embedding()?;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let e = (emb.row(i) - emb.row(j)).norm();
            worst = worst.max((e - op.distance(i, j)?).abs());
        }
    }
    eprintln!("self-check: max |embedding - resolution| distance = {worst:e}");
    if worst > SELF_CHECK_TOL {
        return Err(PcnError::SelfCheckFailed {
            error: worst,
            tolerance: SELF_CHECK_TOL,
        });
    }
    Ok(worst)
}

fn cmd_knn(args: &KnnArgs) -> pcnet::Result<()> {
    let mut opts = ExperimentConfig::default().standardize;
    opts.prestandardize_features = !args.input.no_prestandardize;
    opts.standardize_columns = args.standardize_samples;
    let table = load_csv_with(
        &args.input.input,
        &LoadOptions {
            label_column: args.input.label_column.clone(),
            drop_incomplete_rows: args.input.drop_incomplete_rows,
            one_hot: args.input.one_hot,
        },
    )?;
    let reg_grid = args
        .reg_grid
        .as_ref()
        .map(|g| g.iter().map(|s| s.parse()).collect::<pcnet::Result<Vec<_>>>())
        .transpose()?;
    let cfg = ExperimentConfig {
        k_folds: args.folds,
        seed: args.seed,
        k_grid: args.k_grid.clone().unwrap_or_else(|| DEFAULT_K_GRID.to_vec()),
        reg_grid,
        forms: args.form.iter().map(|&f| f.into()).collect(),
        mode: match args.metric {
            KnnMetric::PcnExact => PcnMode::Exact,
            KnnMetric::PcnApprox => PcnMode::Approx,
        },
        sign_convention: args.sign_convention.into(),
        standardize: opts,
        n_limit: args.n_limit,
    };
    let name = args.dataset_name.clone().unwrap_or_else(|| {
        args.input
            .input
            .file_stem()
            .map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let outcome = run_experiment(&name, &table, &cfg)?;
    let prov = Provenance::new("knn", args, Some(args.seed));

    #[derive(Serialize)]
    struct KnnJson<'a> {
        #[serde(flatten)]
        provenance: &'a Provenance,
        #[serde(flatten)]
        report: &'a pcnet::CvReport,
        best_standard: Option<&'a pcnet::knn::CvCell>,
        best_pcn: Option<&'a pcnet::knn::CvCell>,
        summary: &'a Table1Row,
    }
    // the report carries the seed itself
    let json_prov = Provenance { seed: None, ..prov.clone() };
    let json_path = args.output.with_extension("json");
    write_json(
        &json_path,
        &KnnJson {
            provenance: &json_prov,
            report: &outcome.report,
            best_standard: outcome.report.best_standard(),
            best_pcn: outcome.report.best_pcn(),
            summary: &outcome.row,
        },
    )?;
    let csv_path = args.output.with_extension("csv");
    let mut w = create(&csv_path)?;
    w.write_all(prov.csv_comment().as_bytes())
        .and_then(|_| writeln!(w, "{}", Table1Row::CSV_HEADER))
        .and_then(|_| writeln!(w, "{}", outcome.row.to_csv()))
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&csv_path, e))?;
    println!("{}", outcome.row.to_csv());
    Ok(())
}

fn cmd_svd_cache(args: &SvdCacheArgs) -> pcnet::Result<()> {
    let (_, data) = args.input.load()?;
    let svd = compute_svd(&data)?;
    let reg = args.reg.spec();
    let filters = reg.map(|r| filter_factors(&svd, &r)).transpose()?;
    let path = &args.out.output;
    let mut w = create(path)?;
    write_svd_cache(&mut w, &svd, filters.as_deref())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))?;
    let prov = Provenance::new("svd-cache", args, None);
    write_json(
        &sidecar_path(path),
        &Sidecar {
            provenance: &prov,
            command: "svd-cache",
            output: path.display().to_string(),
            format: Some(FormatArg::FactoredBin),
            m: data.m(),
            n: data.n(),
            numerical_rank: svd.numerical_rank,
            reg,
            form: None,
            sign_convention: None,
            diag_r: None,
            d: None,
            degenerate_columns: data.n_degenerate(),
            self_check_max_error: None,
        },
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Network(a) => cmd_network(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Knn(a) => cmd_knn(a),
        Command::SvdCache(a) => cmd_svd_cache(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
