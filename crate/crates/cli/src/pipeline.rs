//! Subcommand implementations. Every command reads its inputs from the
//! config and the output directory and writes flat artifacts back to it.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crashsev_core::ingest::{self, CrashRecord, IngestReport, COVARIATES};
use crashsev_core::probit::{self, Dataset, EstimationResult};
use crashsev_core::raster::{self, GridSpec, Rasterized};
use crashsev_core::spatial::{self, HotspotLabel};
use crashsev_core::stability::{self, DistrictFit, LrTestResult, TransferMatrix};
use crashsev_core::synth;

use crate::config::PipelineConfig;
use crate::table;

pub const SCHEMA_RASTER: &str = "crashsev.raster_summary/1";
pub const SCHEMA_MORAN: &str = "crashsev.moran/1";
pub const SCHEMA_DISTRICTS: &str = "crashsev.districts/1";
pub const SCHEMA_FIT: &str = "crashsev.fit/1";
pub const SCHEMA_TRANSFER: &str = "crashsev.transfer_matrix/1";
pub const SCHEMA_POOLED: &str = "crashsev.pooled_test/1";
pub const SCHEMA_SYNTH: &str = "crashsev.synth_truth/1";

/// Resolved run settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
    /// Include wall-clock times in reports.
    pub stamp: bool,
}

impl Context {
    pub fn new(config: PipelineConfig, stamp: bool) -> Self {
        let out = config.output_dir.clone();
        Context { config, out, stamp }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating output directory {}", self.out.display()))
    }
}

/// Fit outcome that was written to disk but did not converge.
#[derive(Debug)]
pub struct NotConverged(pub Vec<String>);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "estimation did not converge for: {}", self.0.join(", "))
    }
}

impl std::error::Error for NotConverged {}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_crashes(ctx: &Context) -> Result<(PathBuf, IngestReport)> {
    let path = ctx
        .config
        .input
        .crashes
        .clone()
        .ok_or_else(|| anyhow!("no input file configured (set input.crashes or pass --input)"))?;
    let file = File::open(&path).with_context(|| format!("cannot open input {}", path.display()))?;
    let report = ingest::parse_crashes(BufReader::new(file), &ctx.config.input.mapping, ctx.config.input.parse_mode)
        .with_context(|| format!("reading {}", path.display()))?;
    for e in &report.row_errors {
        log::warn!("{}: row {}: {}", path.display(), e.row, e.message);
    }
    Ok((path, report))
}

fn read_district_records(path: &Path) -> Result<Vec<CrashRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let report = ingest::parse_crashes(
        BufReader::new(file),
        &ingest::ColumnMapping::default(),
        ingest::ParseMode::FailFast,
    )
    .with_context(|| format!("reading {}", path.display()))?;
    Ok(report.records)
}

struct RasterStage {
    input: PathBuf,
    ingest: IngestReport,
    grid: Option<GridSpec>,
    raster: Option<Rasterized>,
}

fn raster_stage(ctx: &Context) -> Result<RasterStage> {
    let (input, ingest) = load_crashes(ctx)?;
    let grid = match ctx.config.grid.fixed_extent() {
        Some(g) => {
            g.validate()?;
            Some(g)
        }
        None if ingest.records.is_empty() => None,
        None => Some(GridSpec::covering(&ingest.records, ctx.config.grid.cell_size_km)?),
    };
    let raster = grid.as_ref().map(|g| raster::rasterize(&ingest.records, g)).transpose()?;
    if let Some(r) = &raster {
        if !r.out_of_extent.is_empty() {
            log::warn!("{} records fall outside the grid extent", r.out_of_extent.len());
        }
    }
    Ok(RasterStage {
        input,
        ingest,
        grid,
        raster,
    })
}

fn write_raster_artifacts(ctx: &Context, stage: &RasterStage) -> Result<()> {
    let geojson = match (&stage.grid, &stage.raster) {
        (Some(g), Some(r)) => raster::cells_geojson(g, &r.cells),
        _ => json!({"type": "FeatureCollection", "features": []}),
    };
    write_json(&ctx.path("cells.geojson"), &geojson)?;
    let (n_cells, total_crashes, total_attribute, outside) = match &stage.raster {
        Some(r) => (r.cells.len(), r.total_crashes(), r.total_attribute(), r.out_of_extent.len()),
        None => (0, 0, 0.0, 0),
    };
    let summary = json!({
        "schema": SCHEMA_RASTER,
        "input": file_label(&stage.input),
        "n_records": stage.ingest.records.len(),
        "n_row_errors": stage.ingest.row_errors.len(),
        "row_errors": stage.ingest.row_errors.iter().map(|e| json!({"row": e.row, "message": e.message})).collect::<Vec<_>>(),
        "missing_covariate_cells": stage.ingest.missing,
        "grid": stage.grid,
        "n_cells": n_cells,
        "total_crashes": total_crashes,
        "total_attribute": total_attribute,
        "out_of_extent": outside,
    });
    write_json(&ctx.path("raster_summary.json"), &summary)
}

pub fn cmd_rasterize(ctx: &Context) -> Result<()> {
    ctx.ensure_out()?;
    let stage = raster_stage(ctx)?;
    write_raster_artifacts(ctx, &stage)?;
    log::info!(
        "rasterized {} records into {} cells",
        stage.ingest.records.len(),
        stage.raster.as_ref().map_or(0, |r| r.cells.len())
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictSummary {
    pub district_id: usize,
    pub member_cells: Vec<(usize, usize)>,
    pub crash_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictsFile {
    pub schema: String,
    pub options: spatial::DistrictOptions,
    pub districts: Vec<DistrictSummary>,
    pub warnings: Vec<String>,
}

fn remove_stale(ctx: &Context, prefix: &str) -> Result<()> {
    if !ctx.out.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(&ctx.out)? {
        let path = entry?.path();
        let name = file_label(&path);
        if name.starts_with(prefix) {
            fs::remove_file(&path).with_context(|| format!("removing stale {}", path.display()))?;
        }
    }
    Ok(())
}

pub fn cmd_analyze(ctx: &Context) -> Result<()> {
    ctx.ensure_out()?;
    let stage = raster_stage(ctx)?;
    write_raster_artifacts(ctx, &stage)?;
    let (grid, raster) = match (&stage.grid, &stage.raster) {
        (Some(g), Some(r)) if !r.cells.is_empty() => (g, r),
        _ => bail!("no crashes inside the grid; nothing to analyze"),
    };
    let weights = raster::queen_weights(&raster.cells)?;
    let attributes = raster.attributes();
    let moran = spatial::morans_test(&attributes, &weights).context("global autocorrelation test")?;
    write_json(
        &ctx.path("moran.json"),
        &json!({
            "schema": SCHEMA_MORAN,
            "n_cells": raster.cells.len(),
            "result": moran,
            "significant_95": moran.significant(),
        }),
    )?;

    let z = spatial::getis_ord_gstar(&attributes, &weights)?;
    let labels: Vec<HotspotLabel> = spatial::classify_hotspots(&z);
    let opts = ctx.config.hotspots;
    let extraction = spatial::extract_districts(raster, &weights, &labels, &stage.ingest.records, &opts)?;
    let mut owner = std::collections::BTreeMap::new();
    for d in &extraction.districts {
        for &cell in &d.member_cells {
            owner.insert(cell, d.district_id);
        }
    }
    let hotspots = raster::cells_geojson_with(grid, &raster.cells, |i, c| {
        json!({
            "row": c.row,
            "col": c.col,
            "crash_count": c.crash_count,
            "attribute": c.attribute,
            "gi_z": labels[i].z,
            "category": labels[i].category.as_str(),
            "district": owner.get(&(c.row, c.col)),
        })
    });
    write_json(&ctx.path("hotspots.geojson"), &hotspots)?;

    remove_stale(ctx, "district_")?;
    let mut index = csv::Writer::from_path(ctx.path("districts.csv"))?;
    index.write_record(["district_id", "n_cells", "crash_count"])?;
    let names: Vec<String> = COVARIATES.iter().map(|s| s.to_string()).collect();
    for d in &extraction.districts {
        index.write_record([
            d.district_id.to_string(),
            d.member_cells.len().to_string(),
            d.crash_count.to_string(),
        ])?;
        let path = ctx.path(&format!("district_{}.csv", d.district_id));
        let file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        ingest::write_crashes(file, &d.records, &names)?;
    }
    index.flush()?;
    write_json(
        &ctx.path("districts.json"),
        &DistrictsFile {
            schema: SCHEMA_DISTRICTS.into(),
            options: opts,
            districts: extraction
                .districts
                .iter()
                .map(|d| DistrictSummary {
                    district_id: d.district_id,
                    member_cells: d.member_cells.clone(),
                    crash_count: d.crash_count,
                })
                .collect(),
            warnings: extraction.warnings.clone(),
        },
    )?;
    log::info!(
        "Moran's I {:.5} (z {:.3}); {} districts",
        moran.i,
        moran.z,
        extraction.districts.len()
    );
    Ok(())
}

fn district_ids(ctx: &Context) -> Result<Vec<usize>> {
    let path = ctx.path("districts.json");
    let file: DistrictsFile = read_json(&path).context("district index missing; run `analyze` first")?;
    Ok(file.districts.iter().map(|d| d.district_id).collect())
}

fn district_dataset(ctx: &Context, id: usize) -> Result<Dataset> {
    let path = ctx.path(&format!("district_{id}.csv"));
    if !path.exists() {
        bail!("district {id}: data file {} not found", file_label(&path));
    }
    let records = read_district_records(&path)?;
    let names: Vec<String> = COVARIATES.iter().map(|s| s.to_string()).collect();
    Ok(Dataset::from_records(&records, &names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub schema: String,
    /// District id, or `pooled`.
    pub district: String,
    pub result: EstimationResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

fn fit_one(ctx: &Context, label: &str, data: &Dataset, spec: &probit::ModelSpec) -> Result<FitFile> {
    let started = Instant::now();
    let result = probit::estimate(data, spec).with_context(|| format!("fitting {label}"))?;
    let fit = FitFile {
        schema: SCHEMA_FIT.into(),
        district: label.to_string(),
        result,
        wall_time_s: ctx.stamp.then(|| started.elapsed().as_secs_f64()),
    };
    let stem = if label == "pooled" {
        "fit_pooled".to_string()
    } else {
        format!("fit_district_{label}")
    };
    write_json(&ctx.path(&format!("{stem}.json")), &fit)?;
    let title = if label == "pooled" {
        "Pooled model".to_string()
    } else {
        format!("District {label}")
    };
    fs::write(ctx.path(&format!("{stem}.txt")), table::fit_table(&title, &fit.result))?;
    for w in &fit.result.diagnostics.warnings {
        log::warn!("{title}: {w}");
    }
    Ok(fit)
}

/// Fit one district, `pooled`, or (with `None`) every district and the
/// pooled model.
pub fn cmd_fit(ctx: &Context, district: Option<&str>) -> Result<()> {
    ctx.ensure_out()?;
    let ids = district_ids(ctx)?;
    let mut failed = Vec::new();
    let mut run_district = |id: usize| -> Result<()> {
        let data = district_dataset(ctx, id)?;
        let label = id.to_string();
        let fit = fit_one(ctx, &label, &data, ctx.config.model_for(&label))?;
        if !fit.result.diagnostics.converged {
            failed.push(format!("district {id}"));
        }
        Ok(())
    };
    let want_pooled = match district {
        Some("pooled") => true,
        Some(s) => {
            let id: usize = s.parse().map_err(|_| anyhow!("invalid district id {s:?}"))?;
            if !ids.contains(&id) {
                bail!("district {id} not found among extracted districts {ids:?}");
            }
            run_district(id)?;
            false
        }
        None => {
            for &id in &ids {
                run_district(id)?;
            }
            ids.len() >= 2
        }
    };
    if want_pooled {
        if ids.is_empty() {
            bail!("no districts to pool");
        }
        let parts: Vec<Dataset> = ids.iter().map(|&id| district_dataset(ctx, id)).collect::<Result<_>>()?;
        let refs: Vec<&Dataset> = parts.iter().collect();
        let pooled = Dataset::concat(&refs);
        let fit = fit_one(ctx, "pooled", &pooled, ctx.config.pooled_model())?;
        if !fit.result.diagnostics.converged {
            failed.push("pooled".into());
        }
    }
    if !failed.is_empty() {
        return Err(NotConverged(failed).into());
    }
    Ok(())
}

fn load_fit(ctx: &Context, label: &str) -> Result<FitFile> {
    let stem = if label == "pooled" {
        "fit_pooled".to_string()
    } else {
        format!("fit_district_{label}")
    };
    let path = ctx.path(&format!("{stem}.json"));
    if !path.exists() {
        bail!("fit for district {label} not found ({}); run `fit` first", file_label(&path));
    }
    read_json(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledTestFile {
    pub schema: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ll_full: Option<f64>,
    #[serde(default)]
    pub ll_districts: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<LrTestResult>,
}

pub fn cmd_lrtests(ctx: &Context) -> Result<()> {
    ctx.ensure_out()?;
    let ids = district_ids(ctx)?;
    let level = ctx.config.lrtests.level;
    let fits: Vec<FitFile> = ids.iter().map(|id| load_fit(ctx, &id.to_string())).collect::<Result<_>>()?;
    let data: Vec<Dataset> = ids.iter().map(|&id| district_dataset(ctx, id)).collect::<Result<_>>()?;
    let district_fits: Vec<DistrictFit<'_>> = ids
        .iter()
        .zip(&fits)
        .zip(&data)
        .map(|((&id, f), d)| DistrictFit {
            id,
            result: &f.result,
            data: d,
        })
        .collect();
    let matrix: TransferMatrix = stability::transfer_matrix(&district_fits, level)?;
    let mut csv_bytes = Vec::new();
    matrix.write_csv(&mut csv_bytes)?;
    fs::write(ctx.path("transfer_matrix.csv"), csv_bytes)?;
    write_json(
        &ctx.path("transfer_matrix.json"),
        &json!({"schema": SCHEMA_TRANSFER, "level": level, "matrix": matrix}),
    )?;

    let pooled = if ids.len() < 2 {
        let notice = format!("pooled test skipped: {} district(s), need at least 2", ids.len());
        log::warn!("{notice}");
        PooledTestFile {
            schema: SCHEMA_POOLED.into(),
            status: "skipped".into(),
            notice: Some(notice),
            ll_full: None,
            ll_districts: Vec::new(),
            test: None,
        }
    } else {
        let full = load_fit(ctx, "pooled")?;
        let lls: Vec<f64> = fits.iter().map(|f| f.result.ll).collect();
        let counts: Vec<usize> = fits.iter().map(|f| f.result.n_params).collect();
        let derived = stability::pooled_df(&counts, full.result.n_params);
        let df = match (ctx.config.lrtests.pooled_df, derived) {
            (Some(d), derived) => {
                log::info!("pooled test df overridden to {d} (derived: {:?})", derived.ok());
                d
            }
            (None, Ok(d)) => d,
            (None, Err(e)) => return Err(e.into()),
        };
        let test = stability::lr_pooled_test(full.result.ll, &lls, df, level)?;
        PooledTestFile {
            schema: SCHEMA_POOLED.into(),
            status: "ok".into(),
            notice: None,
            ll_full: Some(full.result.ll),
            ll_districts: lls,
            test: Some(test),
        }
    };
    write_json(&ctx.path("pooled_test.json"), &pooled)?;
    Ok(())
}

pub fn cmd_synth(ctx: &Context, n: Option<usize>) -> Result<()> {
    ctx.ensure_out()?;
    let mut cfg = ctx.config.synth_config();
    if let Some(n) = n {
        cfg.n_crashes = n;
    }
    let out = synth::simulate_crashes(&cfg, ctx.config.seed)?;
    let names: Vec<String> = COVARIATES.iter().map(|s| s.to_string()).collect();
    let path = ctx.path("synth_crashes.csv");
    let file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    ingest::write_crashes(file, &out.records, &names)?;
    write_json(
        &ctx.path("synth_truth.json"),
        &json!({"schema": SCHEMA_SYNTH, "truth": out.truth}),
    )?;
    Ok(())
}

fn read_optional(path: &Path) -> Result<Option<Value>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Collect existing artifacts into a single text report.
pub fn cmd_report(ctx: &Context) -> Result<()> {
    ctx.ensure_out()?;
    let mut out = String::new();
    out.push_str("Crash severity pipeline report\n\n");
    if ctx.stamp {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        out.push_str(&format!("Generated at unix time {secs}\n\n"));
    }
    if let Some(s) = read_optional(&ctx.path("raster_summary.json"))? {
        out.push_str("Rasterization\n");
        out.push_str(&format!(
            "  input {}: {} records, {} row errors, {} cells, {} crashes, attribute total {}\n\n",
            s["input"].as_str().unwrap_or(""),
            s["n_records"],
            s["n_row_errors"],
            s["n_cells"],
            s["total_crashes"],
            s["total_attribute"].as_f64().map(table::sig4).unwrap_or_default()
        ));
    }
    if let Some(m) = read_optional(&ctx.path("moran.json"))? {
        let r = &m["result"];
        let f = |k: &str| r[k].as_f64().map(table::sig4).unwrap_or_default();
        out.push_str("Global Moran's I\n");
        out.push_str(&format!(
            "  I = {}  E[I] = {}  V[I] = {}  z = {}  p = {}\n\n",
            f("I"),
            f("E"),
            f("V"),
            f("z"),
            f("p")
        ));
    }
    let districts: Option<DistrictsFile> = if ctx.path("districts.json").exists() {
        Some(read_json(&ctx.path("districts.json"))?)
    } else {
        None
    };
    if let Some(d) = &districts {
        out.push_str("Hotspot districts\n");
        for s in &d.districts {
            out.push_str(&format!(
                "  district {}: {} cells, {} crashes\n",
                s.district_id,
                s.member_cells.len(),
                s.crash_count
            ));
        }
        for w in &d.warnings {
            out.push_str(&format!("  warning: {w}\n"));
        }
        out.push('\n');
        for s in &d.districts {
            let path = ctx.path(&format!("fit_district_{}.txt", s.district_id));
            if path.exists() {
                out.push_str(&fs::read_to_string(&path)?);
                out.push('\n');
            }
        }
    }
    if ctx.path("fit_pooled.txt").exists() {
        out.push_str(&fs::read_to_string(ctx.path("fit_pooled.txt"))?);
        out.push('\n');
    }
    if ctx.path("transfer_matrix.csv").exists() {
        out.push_str("Transferability tests (rows: data, columns: parameters)\n");
        out.push_str(&fs::read_to_string(ctx.path("transfer_matrix.csv"))?);
        out.push('\n');
    }
    if ctx.path("pooled_test.json").exists() {
        let p: PooledTestFile = read_json(&ctx.path("pooled_test.json"))?;
        out.push_str("Pooled versus district models\n");
        match (&p.test, &p.notice) {
            (Some(t), _) => out.push_str(&format!(
                "  chi2 {}; reject at {:.0}%: {}\n",
                t.format_cell(),
                100.0 * t.level,
                t.reject_null
            )),
            (None, Some(n)) => out.push_str(&format!("  {n}\n")),
            _ => {}
        }
    }
    let mut f = File::create(ctx.path("report.txt"))?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// rasterize → analyze → fit → lrtests → report.
pub fn cmd_run(ctx: &Context) -> Result<()> {
    cmd_analyze(ctx)?;
    let fit = cmd_fit(ctx, None);
    if let Err(e) = &fit {
        if e.downcast_ref::<NotConverged>().is_none() {
            return fit;
        }
    }
    cmd_lrtests(ctx)?;
    cmd_report(ctx)?;
    fit
}
