use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ifs_seg::ablation::{self, AblationPlan, Metric};
use ifs_seg::dataset::{self, write_label, write_unit_plane};
use ifs_seg::encoding::{self, plane_histogram};
use ifs_seg::phantom::{self, NUM_CLASSES};
use ifs_seg::svg;
use ifs_seg::train::{self, EncodeConfig, SplitInfo};
use ifs_seg::{Error, Family, MetricsReport, Model};

use crate::args::*;

/// A problem with the invocation rather than with the run; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_report(r: &MetricsReport) {
    println!("AC  {:.4}", r.ac);
    println!("DC  {:.4}", r.dc);
    println!("IoU {:.4}", r.iou);
}

fn write_report(out: &Path, r: &MetricsReport) -> Result<()> {
    write_text(&out.join("metrics.json"), &r.to_json())?;
    let mut csv = Vec::new();
    r.write_csv(&mut csv)?;
    fs::write(out.join("metrics.csv"), csv).context("writing metrics.csv")
}

pub fn encode(cli: &Cli, a: &EncodeArgs) -> Result<()> {
    let membership = a.membership.config().map_err(usage)?;
    let negation = a
        .params
        .config(a.negation)
        .ok_or_else(|| usage("encode needs --negation sugeno or --negation yager"))?;
    let img = dataset::read_intensity(&a.input)?;
    let ifs = encoding::encode(&img, &membership, &negation)?;
    create_dir(&cli.out)?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    for (name, plane) in ["mu", "nu", "pi"].into_iter().zip(ifs.planes()) {
        write_unit_plane(
            &cli.out.join(format!("{stem}_{name}.png")),
            ifs.width,
            ifs.height,
            plane,
        )?;
        plane_histogram(plane, a.bins as usize)?
            .save_csv(&cli.out.join(format!("{stem}_{name}_hist.csv")))?;
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        println!("{name}: mean {mean:.4}");
    }
    println!("wrote 3 planes and 3 histograms to {}", cli.out.display());
    Ok(())
}

pub fn phantom_gen(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let spec = a.spec(cli.seed);
    spec.validate()?;
    if a.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    let samples = phantom::generate(&spec, a.count)?;
    dataset::save_dataset(&cli.out, NUM_CLASSES, &samples)?;
    write_text(
        &cli.out.join("phantom_spec.json"),
        &serde_json::to_string_pretty(&spec)?,
    )?;
    println!("wrote {} phantoms to {}", samples.len(), cli.out.display());
    Ok(())
}

fn encode_config(
    membership: &MembershipArgs,
    params: &NegationArgs,
    kind: NegationKind,
) -> Result<Option<EncodeConfig>> {
    let m = membership.config().map_err(usage)?;
    Ok(params.config(kind).map(|negation| EncodeConfig {
        membership: m,
        negation,
    }))
}

pub fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.data)?;
    let encode = encode_config(&a.membership, &a.params, a.negation)?;
    let cfg = a.training.config(cli.seed, encode);
    let arch = a
        .arch
        .config(a.family.into(), cfg.input_channels(), ds.num_classes);
    let (tr, te) = train::split(&ds.samples, cfg.split_fraction, cfg.seed)?;
    if te.is_empty() {
        return Err(usage(format!(
            "split {} of {} samples leaves no held-out images",
            cfg.split_fraction,
            ds.samples.len()
        )));
    }
    let mut model = Model::<f32>::build(arch, cli.seed)?;
    eprintln!(
        "training {} ({} params) on {} images, validating on {}",
        model.config().family,
        model.param_count(),
        tr.len(),
        te.len()
    );
    let log = train::train_with(&mut model, &tr, &te, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  AC {:.4}  DC {:.4}  IoU {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_ac, e.val_dc, e.val_iou
        )
    })?;
    create_dir(&cli.out)?;
    let ckpt = cli.out.join("model.ifsnet");
    let split = SplitInfo {
        fraction: cfg.split_fraction,
        seed: cfg.seed,
    };
    train::save_model(&ckpt, &model, cfg.encode.as_ref(), Some(split))?;
    log.save_csv(&cli.out.join("epoch_log.csv"))?;
    let report = train::evaluate_model(&mut model, &te, cfg.encode.as_ref())?;
    write_report(&cli.out, &report)?;
    eprintln!(
        "best epoch {}; checkpoint {}",
        log.best_epoch,
        ckpt.display()
    );
    print_report(&report);
    Ok(())
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (mut model, card) = train::load_model(&a.model)?;
    let ds = dataset::load_dataset(&a.data)?;
    if ds.num_classes != card.arch.num_classes {
        return Err(Error::InvalidLabel(format!(
            "dataset has K = {} but the model predicts {} classes",
            ds.num_classes, card.arch.num_classes
        ))
        .into());
    }
    let samples = match a.subset {
        Subset::All => ds.samples,
        Subset::Test => {
            let split = card
                .split
                .ok_or_else(|| usage("model sidecar has no split record; use --subset all"))?;
            train::split(&ds.samples, split.fraction, split.seed)?.1
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let report = train::evaluate_model(&mut model, &samples, card.encode.as_ref())?;
    create_dir(&cli.out)?;
    write_report(&cli.out, &report)?;
    if a.save_predictions {
        let dir = cli.out.join("predictions");
        create_dir(&dir)?;
        for s in &samples {
            let pred = train::predict(&mut model, &s.image, card.encode.as_ref())?;
            write_label(&dir.join(format!("{}.png", s.id)), &pred)?;
        }
    }
    print_report(&report);
    Ok(())
}

fn render_summary_charts(
    out: &Path,
    rows: &[ablation::SummaryRow],
    metrics: &[Metric],
) -> Result<usize> {
    let mut n = 0;
    for family in [Family::UNet, Family::UNetPP] {
        for negation in ["sugeno", "yager"] {
            for &m in metrics {
                if let Some(chart) = svg::summary_chart(rows, family, negation, m) {
                    let path = out.join(format!("{family}_{negation}_{}.svg", m.as_str()));
                    write_text(&path, &chart.render())?;
                    n += 1;
                }
            }
        }
    }
    Ok(n)
}

pub fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.data)?;
    let mut families: Vec<Family> = a.families.iter().map(|&f| f.into()).collect();
    families.dedup();
    let plan = AblationPlan {
        families,
        baselines: !a.no_baselines,
        sugeno_lambdas: parse_grid(&a.lambdas, check_lambda).map_err(usage)?,
        yager_alphas: parse_grid(&a.alphas, check_alpha).map_err(usage)?,
        repeats: a.repeats,
        train: a.training.config(cli.seed, None),
        arch: a.arch.config(Family::UNet, 1, ds.num_classes),
        membership: a.membership.config().map_err(usage)?,
    };
    plan.validate()?;
    let total = plan.cells().len();
    eprintln!("ablation: {total} runs, up to {} in parallel", cli.jobs);
    let done = std::sync::atomic::AtomicUsize::new(0);
    let outcome = ablation::run(&plan, &ds.samples, cli.jobs as usize, |rec, err| {
        let i = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        let what = format!(
            "{} {} {} repeat {}",
            rec.family,
            rec.negation.as_deref().unwrap_or("baseline"),
            rec.param.map(|p| p.to_string()).unwrap_or_default(),
            rec.repeat
        );
        match (err, rec.dc) {
            (Some(e), _) => eprintln!("[{i}/{total}] {what}: FAILED: {e}"),
            (None, Some(dc)) => eprintln!("[{i}/{total}] {what}: DC {dc:.4}"),
            (None, None) => eprintln!("[{i}/{total}] {what}"),
        }
    })?;
    create_dir(&cli.out)?;
    let mut buf = Vec::new();
    ablation::write_records(&mut buf, &outcome.records)?;
    fs::write(cli.out.join("ablation.csv"), buf).context("writing ablation.csv")?;
    let summary = ablation::summarize(&outcome.records);
    let mut buf = Vec::new();
    ablation::write_summary(&mut buf, &summary)?;
    fs::write(cli.out.join("ablation_summary.csv"), buf).context("writing ablation_summary.csv")?;
    let plots = cli.out.join("plots");
    create_dir(&plots)?;
    let charts = render_summary_charts(&plots, &summary, &Metric::ALL)?;
    for m in Metric::ALL {
        if let Some((k, v)) = ablation::best_summary_cell(&summary, m) {
            println!("best {}: {} {} = {v:.4}", m.as_str(), k.family, k.label());
        }
    }
    eprintln!(
        "wrote {} records, {} summary rows, {charts} charts",
        outcome.records.len(),
        summary.len()
    );
    if !outcome.failures.is_empty() {
        eprintln!("{} of {total} runs failed", outcome.failures.len());
        if outcome.failures.len() == total {
            anyhow::bail!("every ablation run failed");
        }
    }
    Ok(())
}

pub fn plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let metrics: Vec<Metric> = match a.metric {
        Some(m) => vec![m.into()],
        None => Metric::ALL.to_vec(),
    };
    create_dir(&cli.out)?;
    let mut n = 0;
    if let Some(path) = &a.summary {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let rows = ablation::read_summary(f)?;
        n += render_summary_charts(&cli.out, &rows, &metrics)?;
    }
    if a.reported {
        let rows = ablation::reported_tables();
        write_text(
            &cli.out.join("reported_tables.csv"),
            ablation::REPORTED_TABLES_CSV,
        )?;
        let mut tables: Vec<&str> = rows.iter().map(|r| r.table.as_str()).collect();
        tables.dedup();
        for table in tables {
            for &m in &metrics {
                if let Some(chart) = svg::reported_chart(&rows, table, m) {
                    write_text(
                        &cli.out.join(format!("reported_{table}_{}.svg", m.as_str())),
                        &chart.render(),
                    )?;
                    n += 1;
                }
            }
        }
    }
    println!("wrote {n} charts to {}", cli.out.display());
    Ok(())
}
