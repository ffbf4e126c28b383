//! Per-record SI-SDR scoring and aggregate reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{beamform, ArrayGeometry, Beamformer};
use crate::error::{bail, Error, Result};
use crate::metrics::si_sdr;
use crate::net::{AngleQuery, Model};
use crate::scene::{Manifest, MixtureRecord, ReceiverRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    NeuralStruct,
    NeuralFlat,
    Das,
    Mvdr,
    /// The unprocessed reference-mic mixture.
    Mixture,
}

impl System {
    pub fn name(&self) -> &'static str {
        match self {
            System::NeuralStruct => "neural_struct",
            System::NeuralFlat => "neural_flat",
            System::Das => "das",
            System::Mvdr => "mvdr",
            System::Mixture => "mixture",
        }
    }

    pub fn is_neural(&self) -> bool {
        matches!(self, System::NeuralStruct | System::NeuralFlat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record_id: String,
    pub system: System,
    pub n_sectors: usize,
    pub selected_sectors: Vec<usize>,
    pub input_si_sdr_db: f64,
    pub output_si_sdr_db: f64,
    pub si_sdri_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub system: System,
    /// `all`, `sector=<i>` (single-sector queries only) or `count=<k>`.
    pub group: String,
    pub n: usize,
    pub mean_si_sdri_db: f64,
    pub std_si_sdri_db: f64,
    pub mean_input_db: f64,
    pub mean_output_db: f64,
    /// Share of rows with positive improvement.
    pub fraction_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
    /// Records skipped because the selected area holds no target.
    pub skipped_empty: Vec<String>,
}

/// How one system turns a record into an estimate.
pub enum Processor<'a> {
    Neural(&'a Model),
    Beamformer {
        method: Beamformer,
        channels: usize,
        rigs: &'a BTreeMap<String, ReceiverRig>,
        frame_spec: crate::signal::FrameSpec,
    },
    Mixture,
}

impl Processor<'_> {
    pub fn run(&self, manifest: &Manifest, rec: &MixtureRecord) -> Result<Vec<f64>> {
        let query = AngleQuery::new(rec.n_sectors, rec.selected_sectors)?;
        match self {
            Processor::Neural(model) => model.forward_offline(&manifest.mixture(rec)?, &query),
            Processor::Mixture => Ok(manifest.mixture(rec)?.channel(0).to_vec()),
            Processor::Beamformer {
                method,
                channels,
                rigs,
                frame_spec,
            } => {
                let rig = rigs
                    .get(&rec.rig_id)
                    .ok_or_else(|| Error::Lookup(format!("unknown rig {}", rec.rig_id)))?;
                let geometry = ArrayGeometry::from_rig(rig, *channels)?;
                let array = manifest.array(rec)?;
                let picked = crate::signal::AudioBuffer::new(array.channels()[..*channels].to_vec())?;
                beamform(&picked, &geometry, &query, *method, frame_spec, rec.noise_head_samples)
            }
        }
    }
}

fn score_record(manifest: &Manifest, rec: &MixtureRecord, system: System, processor: &Processor<'_>) -> Result<EvalRow> {
    let target = manifest.target(rec)?;
    let mix = manifest.mixture(rec)?;
    let est = processor.run(manifest, rec)?;
    let input = si_sdr(mix.channel(0), &target)?;
    let output = si_sdr(&est, &target)?;
    let query = AngleQuery::new(rec.n_sectors, rec.selected_sectors)?;
    Ok(EvalRow {
        record_id: rec.id.clone(),
        system,
        n_sectors: rec.n_sectors,
        selected_sectors: query.sectors(),
        input_si_sdr_db: input,
        output_si_sdr_db: output,
        si_sdri_db: output - input,
    })
}

/// Scores one system on every record whose selected area holds a target,
/// spreading records over the available cores. Returns the rows in
/// manifest order and the ids of skipped target-free records.
pub fn score_system(
    manifest: &Manifest,
    system: System,
    processor: &Processor<'_>,
) -> Result<(Vec<EvalRow>, Vec<String>)> {
    let (todo, empty): (Vec<&MixtureRecord>, Vec<&MixtureRecord>) =
        manifest.records.iter().partition(|r| r.target_present());
    let skipped = empty.into_iter().map(|r| r.id.clone()).collect();
    let lanes = std::thread::available_parallelism().map_or(1, |n| n.get()).min(todo.len().max(1));
    let per = todo.len().div_ceil(lanes).max(1);
    let parts: Vec<Result<Vec<EvalRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = todo
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|rec| score_record(manifest, rec, system, processor))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("evaluation worker panicked".into()))))
            .collect()
    });
    let mut rows = Vec::with_capacity(todo.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok((rows, skipped))
}

fn aggregate(system: System, group: String, rows: &[&EvalRow]) -> Aggregate {
    let n = rows.len();
    let nf = n.max(1) as f64;
    let mean = rows.iter().map(|r| r.si_sdri_db).sum::<f64>() / nf;
    let var = rows.iter().map(|r| (r.si_sdri_db - mean).powi(2)).sum::<f64>() / nf;
    Aggregate {
        system,
        group,
        n,
        mean_si_sdri_db: mean,
        std_si_sdri_db: var.sqrt(),
        mean_input_db: rows.iter().map(|r| r.input_si_sdr_db).sum::<f64>() / nf,
        mean_output_db: rows.iter().map(|r| r.output_si_sdr_db).sum::<f64>() / nf,
        fraction_positive: rows.iter().filter(|r| r.si_sdri_db > 0.0).count() as f64 / nf,
    }
}

impl EvalReport {
    /// Builds a report. Rows are put in canonical (system, record) order
    /// first, so aggregates do not depend on the order rows arrive in.
    pub fn new(mut rows: Vec<EvalRow>, mut skipped_empty: Vec<String>) -> Self {
        rows.sort_by(|a, b| (a.system, &a.record_id).cmp(&(b.system, &b.record_id)));
        skipped_empty.sort();
        skipped_empty.dedup();
        let mut groups: BTreeMap<(System, u8, usize), Vec<&EvalRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.system, 0, 0)).or_default().push(r);
            groups.entry((r.system, 1, r.selected_sectors.len())).or_default().push(r);
            if let [s] = r.selected_sectors[..] {
                groups.entry((r.system, 2, s)).or_default().push(r);
            }
        }
        let aggregates = groups
            .into_iter()
            .map(|((sys, kind, k), rs)| {
                let label = match kind {
                    0 => "all".to_string(),
                    1 => format!("count={k}"),
                    _ => format!("sector={k}"),
                };
                aggregate(sys, label, &rs)
            })
            .collect();
        Self {
            rows,
            aggregates,
            skipped_empty,
        }
    }

    pub fn find(&self, system: System, group: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.system == system && a.group == group)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("record_id,system,n_sectors,selected_sectors,input_si_sdr_db,output_si_sdr_db,si_sdri_db\n");
        for r in &self.rows {
            let sel: Vec<String> = r.selected_sectors.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.record_id,
                r.system.name(),
                r.n_sectors,
                sel.join(" "),
                r.input_si_sdr_db,
                r.output_si_sdr_db,
                r.si_sdri_db
            );
        }
        s
    }

    pub fn aggregates_csv(&self) -> String {
        let mut s = String::from(
            "system,group,n,mean_si_sdri_db,std_si_sdri_db,mean_input_db,mean_output_db,fraction_positive\n",
        );
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                a.system.name(),
                a.group,
                a.n,
                a.mean_si_sdri_db,
                a.std_si_sdri_db,
                a.mean_input_db,
                a.mean_output_db,
                a.fraction_positive
            );
        }
        s
    }

    /// Writes `rows.csv`, `aggregates.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        for (name, text) in [
            ("rows.csv", self.rows_csv()),
            ("aggregates.csv", self.aggregates_csv()),
            ("report.json", json),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Checks that every neural system has a model before any work starts.
pub fn require_models(systems: &[System], have: impl Fn(System) -> bool) -> Result<()> {
    if systems.is_empty() {
        bail!(Argument, "no systems to evaluate");
    }
    for s in systems {
        if s.is_neural() && !have(*s) {
            bail!(Argument, "system {} needs a checkpoint", s.name());
        }
    }
    Ok(())
}
