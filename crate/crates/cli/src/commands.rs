//! Implementations of the six subcommands. Each returns an [`ExitCode`] on
//! success so commands with non-error exit semantics (bound-check) can set
//! their own code; failures bubble up as [`Error`] and are mapped in `main`.

use std::path::Path;
use std::process::ExitCode;

use mdts_core::baselines::{HistogramBinningModel, IsotonicModel};
use mdts_core::dataset::{MultiDomainDataset, Split, SplitResult};
use mdts_core::fileio::atomic_write;
use mdts_core::mdts::{self, FitOptions};
use mdts_core::metrics::{self, MultiDomainReport};
use mdts_core::model::Model;
use mdts_core::regress::{default_grid, RegressorKind, RegressorSpec};
use mdts_core::synth::{self, EmbeddingKind, SynthConfig};
use mdts_core::theory::{self, HypothesisFamily};
use mdts_core::ts;
use mdts_core::{Calibrator, Error, Msp, Result};

use crate::{
    AblateArgs, BoundCheckArgs, EmbeddingArg, EvalArgs, FitArgs, MethodArg, PredictAccArgs,
    RegressorArg, SynthArgs,
};

pub fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let config = SynthConfig {
        num_domains: args.domains,
        ood_domains: args.ood_domains,
        samples_per_domain: args.per_domain,
        num_classes: args.classes,
        embedding: match args.embedding {
            EmbeddingArg::Direct => EmbeddingKind::Direct,
            EmbeddingArg::Mixed => EmbeddingKind::Mixed { extra_dims: args.extra_dims },
        },
        scale_range: args.scale_range,
        logit_std: args.logit_std,
        noise_std: args.noise_std,
        seed: args.seed,
    };
    let (data, scales) = synth::generate(&config)?;
    data.save(&args.out)?;
    let truth = serde_json::json!({ "config": config, "scales": scales });
    let json = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    atomic_write(&args.out.join("ground_truth.json"), json.as_bytes())?;
    for d in data.domains() {
        println!(
            "{}\t{}\tn={}\tscale={:.4}",
            d.id(),
            split_tag(d.split()),
            d.len(),
            scales[d.id()]
        );
    }
    println!("wrote {} domains to {}", data.num_domains(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn fit(args: &FitArgs) -> Result<ExitCode> {
    let data = MultiDomainDataset::load(&args.data)?;
    let cal = ind_halves(&data, args.split_seed)?.calibration;
    let opts = FitOptions { clamp: args.clamp, ..FitOptions::default() };
    let model = match args.method {
        MethodArg::Ts => {
            let m = ts::fit_ts(&cal.pool()?, opts.t_min, opts.t_max)?;
            println!("pooled\tT={:.6}", m.temperature);
            Model::Ts(m)
        }
        MethodArg::Mdts => {
            let intercept = !args.no_intercept;
            let (m, chosen) = if args.grid_search {
                let grid = default_grid(regressor_kind(args.regressor), intercept);
                mdts::fit_mdts_selected(&cal, &grid, opts, args.bins)?
            } else {
                let spec = default_spec(args.regressor).with_intercept(intercept);
                (mdts::fit_mdts(&cal, &spec, opts)?, spec)
            };
            println!("regressor\t{chosen:?}");
            for (id, t) in m.per_domain_temperatures() {
                println!("{id}\tT={t:.6}");
            }
            Model::Mdts(m)
        }
        MethodArg::Histbin => Model::Histbin(HistogramBinningModel::fit(&cal, args.bins)?),
        MethodArg::Isotonic => Model::Isotonic(IsotonicModel::fit(&cal)?),
    };
    model.save(&args.model)?;
    println!("wrote {} model to {}", model.kind_name(), args.model.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: &EvalArgs) -> Result<ExitCode> {
    let data = MultiDomainDataset::load(&args.data)?;
    let model = Model::load(&args.model)?;
    check_compat(&model, &data)?;
    for id in &args.reliability {
        if data.domain(id).is_none() {
            return Err(Error::InvalidData(format!("no domain named {id} in the dataset")));
        }
    }
    create_out_dir(&args.out)?;
    let halves = ind_halves(&data, args.split_seed)?;
    let ind = metrics::evaluate(model.as_calibrator(), &halves.evaluation, args.bins)?;
    write_report(&args.out, "ind", &ind, &args.reliability)?;
    println!("ind\tmdece={:.6}\tpooled_ece={:.6}", ind.mdece, ind.pooled.ece);
    if let Some(ood) = ood_subset(&data) {
        let rep = metrics::evaluate(model.as_calibrator(), &ood, args.bins)?;
        write_report(&args.out, "ood", &rep, &args.reliability)?;
        println!("ood\tmdece={:.6}\tpooled_ece={:.6}", rep.mdece, rep.pooled.ece);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(args: &AblateArgs) -> Result<ExitCode> {
    let data = MultiDomainDataset::load(&args.data)?;
    create_out_dir(&args.out)?;
    let halves = ind_halves(&data, args.split_seed)?;
    let ood = ood_subset(&data);
    let opts = FitOptions { clamp: args.clamp, ..FitOptions::default() };
    let mut csv = String::from("regressor,ind_mdece,ood_mdece\n");
    for kind in RegressorKind::ALL {
        let grid = default_grid(kind, true);
        let (model, _) = mdts::fit_mdts_selected(&halves.calibration, &grid, opts, args.bins)?;
        let ind = metrics::evaluate(&model, &halves.evaluation, args.bins)?.mdece;
        let ood_mdece = match &ood {
            Some(o) => Some(metrics::evaluate(&model, o, args.bins)?.mdece),
            None => None,
        };
        println!(
            "{}\tind_mdece={ind:.6}\tood_mdece={}",
            kind.name(),
            ood_mdece.map_or(String::new(), |v| format!("{v:.6}"))
        );
        // Full precision in the file so rows compare exactly across runs.
        csv.push_str(&format!(
            "{},{ind},{}\n",
            kind.name(),
            ood_mdece.map_or(String::new(), |v| v.to_string())
        ));
    }
    atomic_write(&args.out.join("ablation.csv"), csv.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

pub fn predict_acc(args: &PredictAccArgs) -> Result<ExitCode> {
    let data = MultiDomainDataset::load(&args.data)?;
    let model = Model::load(&args.model)?;
    let Model::Mdts(per_sample) = &model else {
        return Err(Error::InvalidData(format!(
            "predict-acc compares msp, ts, and mdts; got a {} model",
            model.kind_name()
        )));
    };
    check_compat(&model, &data)?;
    create_out_dir(&args.out)?;
    let halves = ind_halves(&data, args.split_seed)?;
    let ood = ood_subset(&data);
    let pooled_ts = ts::fit_ts(&halves.calibration.pool()?, ts::DEFAULT_T_MIN, ts::DEFAULT_T_MAX)?;
    let methods: [(&str, &dyn Calibrator); 3] =
        [("msp", &Msp), ("ts", &pooled_ts), ("mdts", per_sample)];
    let mut csv = String::from("split,domain,n,accuracy,msp_conf,ts_conf,mdts_conf\n");
    for (tag, subset) in [("ind", Some(&halves.evaluation)), ("ood", ood.as_ref())] {
        let Some(subset) = subset else { continue };
        let reports = methods
            .iter()
            .map(|(_, h)| metrics::evaluate(*h, subset, args.bins))
            .collect::<Result<Vec<_>>>()?;
        for (i, (id, base)) in reports[0].per_domain.iter().enumerate() {
            let confs: Vec<String> = reports
                .iter()
                .map(|r| r.per_domain[i].1.mean_confidence.to_string())
                .collect();
            csv.push_str(&format!(
                "{tag},{id},{},{},{}\n",
                base.n,
                base.mean_accuracy,
                confs.join(",")
            ));
        }
        for ((name, _), rep) in methods.iter().zip(&reports) {
            let mae = metrics::accuracy_prediction_mae(&rep.per_domain)?;
            println!("{tag}\t{name}\tmae={mae:.6}");
        }
    }
    atomic_write(&args.out.join("accuracy_prediction.csv"), csv.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

pub fn bound_check(args: &BoundCheckArgs) -> Result<ExitCode> {
    let data = MultiDomainDataset::load(&args.data)?;
    let model = Model::load(&args.model)?;
    check_compat(&model, &data)?;
    let ind = data.filter_split(Split::Ind)?;
    let target = ood_subset(&data)
        .ok_or_else(|| {
            Error::InvalidData("bound-check needs held-out (ood) domains in the dataset".into())
        })?
        .pool()?;
    create_out_dir(&args.out)?;
    let family = HypothesisFamily::log_spaced(
        args.temp_grid,
        ts::DEFAULT_T_MIN,
        ts::DEFAULT_T_MAX,
        args.threshold_grid,
    )?;
    let alpha = theory::optimize_alpha(ind.domains(), &target, &family, args.alpha_resolution)?;
    let report = theory::check_bound(
        ind.domains(),
        &target,
        model.as_calibrator(),
        &family,
        &alpha,
        args.slack,
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    atomic_write(&args.out.join("bound_report.json"), json.as_bytes())?;
    let alphas: Vec<String> = report.alpha.alpha().iter().map(|a| format!("{a:.4}")).collect();
    println!(
        "lhs={:.6}\trhs={:.6}\td_hbar={:.6}\tlambda={:.6}\talpha=[{}]\tholds={}",
        report.lhs,
        report.rhs,
        report.d_hbar,
        report.lambda,
        alphas.join(","),
        report.holds
    );
    Ok(if report.holds { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Ind => "ind",
        Split::Ood => "ood",
    }
}

fn regressor_kind(arg: RegressorArg) -> RegressorKind {
    match arg {
        RegressorArg::Ols => RegressorKind::Ols,
        RegressorArg::Ridge => RegressorKind::Ridge,
        RegressorArg::Huber => RegressorKind::Huber,
        RegressorArg::Krr => RegressorKind::Krr,
        RegressorArg::Knn => RegressorKind::Knn,
    }
}

/// Hyperparameters used when `--grid-search` is off.
fn default_spec(arg: RegressorArg) -> RegressorSpec {
    match arg {
        RegressorArg::Ols => RegressorSpec::ols(),
        RegressorArg::Ridge => RegressorSpec::ridge(1.0),
        RegressorArg::Huber => RegressorSpec::huber(1.35, 0.0),
        RegressorArg::Krr => RegressorSpec::krr(0.1, 1e-2),
        RegressorArg::Knn => RegressorSpec::knn(10),
    }
}

/// The InD calibration/evaluation halves, split by seed.
fn ind_halves(data: &MultiDomainDataset, split_seed: u64) -> Result<SplitResult> {
    data.filter_split(Split::Ind)?.split_half(split_seed)
}

/// The held-out domains, when the dataset has any.
fn ood_subset(data: &MultiDomainDataset) -> Option<MultiDomainDataset> {
    data.domains()
        .iter()
        .any(|d| d.split() == Split::Ood)
        .then(|| data.filter_split(Split::Ood).expect("split is nonempty"))
}

/// Dimension compatibility between a loaded model and a dataset, checked up
/// front so mismatches fail before any output is written.
fn check_compat(model: &Model, data: &MultiDomainDataset) -> Result<()> {
    if let Model::Mdts(m) = model {
        if m.num_classes() != data.num_classes() || m.embedding_dim() != data.embedding_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} classes and {}-dim embeddings, dataset has {} and {}",
                m.num_classes(),
                m.embedding_dim(),
                data.num_classes(),
                data.embedding_dim()
            )));
        }
    }
    Ok(())
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::IoFailure {
        path: dir.to_path_buf(),
        source,
    })
}

/// Write `report_{tag}.json`, the pooled reliability table, and one table
/// per requested domain present in this report.
fn write_report(
    out: &Path,
    tag: &str,
    report: &MultiDomainReport,
    requested: &[String],
) -> Result<()> {
    atomic_write(&out.join(format!("report_{tag}.json")), report.to_json().as_bytes())?;
    atomic_write(
        &out.join(format!("reliability_{tag}_pooled.csv")),
        metrics::reliability_csv(&report.pooled).as_bytes(),
    )?;
    for id in requested {
        if let Some((_, ece)) = report.per_domain.iter().find(|(d, _)| d == id) {
            atomic_write(
                &out.join(format!("reliability_{}.csv", file_stem(id))),
                metrics::reliability_csv(ece).as_bytes(),
            )?;
        }
    }
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
