//! End-to-end experiment runs, ablation suites, and result tables.
//!
//! A single run goes space → split → dataset → model → fit → evaluate and
//! leaves four artifacts in a directory named by the config hash: the
//! effective config, the per-step loss CSV, the report CSV, and the
//! checkpoint. Ablation suites enumerate fixed row sets (27 prompt-form
//! combinations, 7 element subsets, 5 fusion orders), run each cell once
//! per seed, and report the per-cell mean with per-seed values kept.

use std::path::{Path, PathBuf};

use crate::config::{form_label, ExperimentConfig};
use crate::data::{build_generator, materialize_dataset};
use crate::error::{Error, Result};
use crate::fusion::FusionOrder;
use crate::metrics::{self, csv_quote, pct, EvalReport};
use crate::model::Model;
use crate::prompt::PromptForm;
use crate::space::{generate_space, make_split, World};
use crate::train::{fit, TrainHistory};

// ── Single runs ─────────────────────────────────────────────────────────

/// Everything a run produces in memory.
#[derive(Debug)]
pub struct RunOutput {
    pub history: TrainHistory,
    /// One report per requested world.
    pub reports: Vec<EvalReport>,
}

/// Space, split, and dataset for a config — the data side of a run.
pub struct Pipeline {
    pub space: crate::space::CompositionSpace,
    pub split: crate::space::Split,
    pub dataset: crate::data::Dataset,
}

/// Deterministically rebuild the data pipeline a config describes.
pub fn build_pipeline(config: &ExperimentConfig) -> Result<Pipeline> {
    config.validate()?;
    let space = generate_space(config.n_states, config.n_objects)?;
    let split = make_split(
        &space,
        config.unseen_fraction,
        config.samples_per_pair,
        config.eval_per_pair,
        config.seed,
    )?;
    let generator = build_generator(&space, config.d_in, config.seed)?;
    let dataset = materialize_dataset(&space, &split, &generator, config.noise_sigma, config.seed)?;
    Ok(Pipeline { space, split, dataset })
}

/// Test-set reports for an already-trained model, one per requested world.
pub fn evaluate_model(
    config: &ExperimentConfig,
    pipeline: &Pipeline,
    model: &Model,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for world in config.world.worlds() {
        let ctx = model.eval_context(&pipeline.split, world)?;
        let scores = model.score_samples(&ctx, &pipeline.dataset.test)?;
        reports.push(metrics::evaluate(world, &scores, config.sweep_points)?);
    }
    Ok(reports)
}

/// Run the full pipeline without touching disk (checkpoint optional).
pub fn execute(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunOutput> {
    let pipeline = build_pipeline(config)?;
    let mut model = Model::init(&pipeline.space, config.model_config(), config.seed)?;
    let history = fit(
        &mut model,
        &pipeline.dataset,
        &pipeline.split,
        &config.fit_config(),
        config.hash(),
        checkpoint,
    )?;
    let reports = evaluate_model(config, &pipeline, &model)?;
    Ok(RunOutput { history, reports })
}

/// A completed run plus where its artifacts live.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub output: RunOutput,
}

/// Run the pipeline and write the four artifacts (config.txt, loss.csv,
/// report.csv, model.ckpt) into `out_root/<config hash>/`. Re-running the
/// same config overwrites its own artifacts; a directory holding a
/// *different* config is never overwritten.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let dir = ensure_run_dir(config, out_root)?;
    let output = execute(config, Some(&dir.join("model.ckpt")))?;
    std::fs::write(dir.join("loss.csv"), output.history.loss_csv())?;

    let method = config.method_label();
    let mut report_csv = String::from(EvalReport::CSV_HEADER);
    report_csv.push('\n');
    for report in &output.reports {
        report_csv.push_str(&report.csv_row(&method));
        report_csv.push('\n');
    }
    std::fs::write(dir.join("report.csv"), report_csv)?;
    Ok(RunArtifacts { dir, output })
}

/// Output root: `MFSB_OUT_DIR` if set, else `out/`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("MFSB_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Locate (and create) the content-addressed run directory for a config,
/// writing its config echo. A directory already holding a *different*
/// config echo is refused rather than overwritten.
pub fn ensure_run_dir(config: &ExperimentConfig, out_root: &Path) -> Result<PathBuf> {
    let dir = out_root.join(format!("{:016x}", config.hash()));
    let echo = config.echo();
    let config_path = dir.join("config.txt");
    if config_path.exists() {
        let existing = std::fs::read_to_string(&config_path)?;
        if existing != echo {
            return Err(Error::Format(format!(
                "run directory {} holds a different config; refusing to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&config_path, &echo)?;
    Ok(dir)
}

// ── Result tables ───────────────────────────────────────────────────────

/// One table row: a method label and the four headline metrics as ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRow {
    pub method: String,
    pub s: f64,
    pub u: f64,
    pub hm: f64,
    pub auc: f64,
}

/// Rows for one world, emitted as CSV or markdown with ×100 2-decimal
/// formatting.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub world: World,
    pub rows: Vec<ResultsRow>,
}

/// Emission format for result tables.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Markdown,
}

impl OutputFormat {
    pub fn parse(text: &str) -> Result<OutputFormat> {
        match text {
            "csv" => Ok(OutputFormat::Csv),
            "markdown" => Ok(OutputFormat::Markdown),
            other => Err(Error::Config(format!("unknown format {other:?}, expected csv or markdown"))),
        }
    }
}

impl ResultsTable {
    fn check(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("results table has no rows".into()));
        }
        if self.rows.iter().any(|r| r.method.is_empty()) {
            return Err(Error::Config("results table row has an empty method label".into()));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        self.check()?;
        let mut out = String::from(EvalReport::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_quote(&row.method),
                self.world.label(),
                pct(row.s),
                pct(row.u),
                pct(row.hm),
                pct(row.auc)
            ));
        }
        Ok(out)
    }

    pub fn to_markdown(&self) -> Result<String> {
        self.check()?;
        let mut out = format!("{} world\n\n", self.world.label());
        out.push_str("| method | S | U | HM | AUC |\n");
        out.push_str("| --- | --- | --- | --- | --- |\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                row.method,
                pct(row.s),
                pct(row.u),
                pct(row.hm),
                pct(row.auc)
            ));
        }
        Ok(out)
    }

    pub fn emit(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Markdown => self.to_markdown(),
        }
    }

    /// Parse a table back from its CSV emission.
    pub fn from_csv(text: &str) -> Result<ResultsTable> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("results CSV is empty".into()))?;
        if header != EvalReport::CSV_HEADER {
            return Err(Error::Format(format!("bad results CSV header: {header:?}")));
        }
        let mut world: Option<World> = None;
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields = split_csv_line(line)?;
            if fields.len() != 6 {
                return Err(Error::Format(format!("expected 6 CSV fields, got {}", fields.len())));
            }
            let row_world = match fields[1].as_str() {
                "open" => World::Open,
                "closed" => World::Closed,
                other => return Err(Error::Format(format!("unknown world {other:?}"))),
            };
            match world {
                None => world = Some(row_world),
                Some(w) if w != row_world => {
                    return Err(Error::Format("results CSV mixes worlds in one table".into()))
                }
                _ => {}
            }
            let num = |field: &str| -> Result<f64> {
                field
                    .parse::<f64>()
                    .map(|v| v / 100.0)
                    .map_err(|_| Error::Format(format!("bad numeric field {field:?}")))
            };
            rows.push(ResultsRow {
                method: fields[0].clone(),
                s: num(&fields[2])?,
                u: num(&fields[3])?,
                hm: num(&fields[4])?,
                auc: num(&fields[5])?,
            });
        }
        let table = ResultsTable {
            world: world.ok_or_else(|| Error::Format("results CSV has no rows".into()))?,
            rows,
        };
        table.check()?;
        Ok(table)
    }
}

/// Split one CSV line, honoring double-quoted fields.
fn split_csv_line(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut chars = line.chars().peekable();
    let mut in_quotes = false;
    while let Some(c) = chars.next() {
        if in_quotes {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    current.push('"');
                    chars.next();
                } else {
                    in_quotes = false;
                }
            } else {
                current.push(c);
            }
        } else {
            match c {
                '"' => in_quotes = true,
                ',' => fields.push(std::mem::take(&mut current)),
                _ => current.push(c),
            }
        }
    }
    if in_quotes {
        return Err(Error::Format(format!("unterminated quote in CSV line {line:?}")));
    }
    fields.push(current);
    Ok(fields)
}

// ── Ablation suites ─────────────────────────────────────────────────────

/// The three ablation axes.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Suite {
    PromptForms,
    Components,
    Fusion,
}

impl Suite {
    pub fn key(self) -> &'static str {
        match self {
            Suite::PromptForms => "prompt_forms",
            Suite::Components => "components",
            Suite::Fusion => "fusion",
        }
    }

    pub fn parse(text: &str) -> Result<Suite> {
        match text {
            "prompt_forms" => Ok(Suite::PromptForms),
            "components" => Ok(Suite::Components),
            "fusion" => Ok(Suite::Fusion),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}, expected prompt_forms, components, or fusion"
            ))),
        }
    }
}

/// One ablation cell: the row label and the config that produces it.
pub struct SuiteCell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// The fixed row set of a suite, derived from a base config.
pub fn suite_cells(suite: Suite, base: &ExperimentConfig) -> Vec<SuiteCell> {
    match suite {
        Suite::PromptForms => {
            // Pair-block order Hard+Soft, Soft, Hard; obj and attr cycle
            // Hard, Soft, Hard+Soft within each block.
            let pair_forms = [PromptForm::HardPlusSoft, PromptForm::Soft, PromptForm::Hard];
            let inner = [PromptForm::Hard, PromptForm::Soft, PromptForm::HardPlusSoft];
            let mut cells = Vec::with_capacity(27);
            for pair in pair_forms {
                for obj in inner {
                    for attr in inner {
                        let mut config = base.clone();
                        config.active = [true, true, true];
                        config.forms = [pair, attr, obj];
                        cells.push(SuiteCell {
                            label: format!(
                                "{} {{Pair}}, {} {{Obj}}, {} {{Attr}}",
                                form_label(pair),
                                form_label(obj),
                                form_label(attr)
                            ),
                            config,
                        });
                    }
                }
            }
            cells
        }
        Suite::Components => {
            let rows: [(&str, [bool; 3]); 7] = [
                ("Pair", [true, false, false]),
                ("Object", [false, false, true]),
                ("State", [false, true, false]),
                ("Object + State", [false, true, true]),
                ("Pair + Object", [true, false, true]),
                ("Pair + State", [true, true, false]),
                ("Pair + State + Object", [true, true, true]),
            ];
            rows.iter()
                .map(|(label, active)| {
                    let mut config = base.clone();
                    config.active = *active;
                    SuiteCell { label: label.to_string(), config }
                })
                .collect()
        }
        Suite::Fusion => FusionOrder::ALL
            .iter()
            .map(|order| {
                let mut config = base.clone();
                config.active = [true, true, true];
                config.order = *order;
                SuiteCell { label: order.label().to_string(), config }
            })
            .collect(),
    }
}

/// Mean tables per world, plus the per-seed tables behind them.
#[derive(Debug)]
pub struct SuiteResult {
    pub suite: Suite,
    pub tables: Vec<ResultsTable>,
    pub per_seed: Vec<(u64, Vec<ResultsTable>)>,
}

/// Run every cell of a suite once per seed and average per cell.
pub fn run_ablation_suite(
    suite: Suite,
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<SuiteResult> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = suite_cells(suite, base);
    let worlds = base.world.worlds();

    let mut per_seed: Vec<(u64, Vec<ResultsTable>)> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut tables: Vec<ResultsTable> = worlds
            .iter()
            .map(|&world| ResultsTable { world, rows: Vec::new() })
            .collect();
        for cell in &cells {
            let mut config = cell.config.clone();
            config.seed = seed;
            let output = execute(&config, None)?;
            for (table, report) in tables.iter_mut().zip(&output.reports) {
                table.rows.push(ResultsRow {
                    method: cell.label.clone(),
                    s: report.seen_acc,
                    u: report.unseen_acc,
                    hm: report.harmonic_mean,
                    auc: report.auc,
                });
            }
        }
        per_seed.push((seed, tables));
    }

    let n = seeds.len() as f64;
    let tables: Vec<ResultsTable> = worlds
        .iter()
        .enumerate()
        .map(|(w, &world)| ResultsTable {
            world,
            rows: cells
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let mut mean = ResultsRow {
                        method: cell.label.clone(),
                        s: 0.0,
                        u: 0.0,
                        hm: 0.0,
                        auc: 0.0,
                    };
                    for (_, seed_tables) in &per_seed {
                        let row = &seed_tables[w].rows[c];
                        mean.s += row.s / n;
                        mean.u += row.u / n;
                        mean.hm += row.hm / n;
                        mean.auc += row.auc / n;
                    }
                    mean
                })
                .collect(),
        })
        .collect();

    Ok(SuiteResult { suite, tables, per_seed })
}

/// Per-seed CSV dump: seed column plus the standard report columns.
pub fn per_seed_csv(result: &SuiteResult) -> String {
    let mut out = format!("seed,{}\n", EvalReport::CSV_HEADER);
    for (seed, tables) in &result.per_seed {
        for table in tables {
            for row in &table.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    seed,
                    csv_quote(&row.method),
                    table.world.label(),
                    pct(row.s),
                    pct(row.u),
                    pct(row.hm),
                    pct(row.auc)
                ));
            }
        }
    }
    out
}
