use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pair_hash, write_file, DataProvider, PairSample};
use crate::data::endpoint_error;
use crate::error::Result;
use crate::grid::{resize_field_to, DisplacementField};
use crate::metrics::{
    brain_mask, evaluate_pair, jacobian_map, mean_disp, ndv_pct, sdlogj, MetricsReport, NdvMode, PairMetrics,
};
use crate::models::RegistrationModel;

/// What produces a field for each pair.
pub enum Predictor {
    /// Zero displacement: the pre-aligned ("affine") baseline row.
    Identity,
    Model(Box<RegistrationModel>),
}

impl Predictor {
    pub fn name(&self) -> &str {
        match self {
            Predictor::Identity => "affine",
            Predictor::Model(m) => m.name().as_str(),
        }
    }

    /// Full-resolution field registering source onto target.
    pub fn full_field(&self, pair: &PairSample) -> Result<DisplacementField> {
        let d = pair.target.dims();
        match self {
            Predictor::Identity => Ok(DisplacementField::zeros(d, 0)),
            Predictor::Model(m) => {
                let p = m.predict(&pair.target, &pair.source)?;
                Ok(resize_field_to(&p.field, 0, d))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub pairs: Vec<PairMetrics>,
    pub pair_hash: String,
}

fn score(pred: &Predictor, pair: &PairSample) -> Result<PairMetrics> {
    let field = pred.full_field(pair)?;
    let id = format!("{}|{}", pair.target_id, pair.source_id);
    let mut m = match (&pair.target_labels, &pair.source_labels) {
        (Some(t), Some(s)) => evaluate_pair(&id, pred.name(), t, s, &field, pair.target.spacing())?,
        _ => {
            log::warn!("pair {id} has no label maps; overlap metrics are NaN");
            let mask = vec![true; field.dims().len()];
            PairMetrics {
                pair_id: id.clone(),
                variant: pred.name().to_string(),
                dsc: f64::NAN,
                hd90: f64::NAN,
                sdlogj: sdlogj(&jacobian_map(&field), &mask)?,
                ndv_pct: ndv_pct(&field, &mask, NdvMode::Simplex)?,
                ndv_central_pct: ndv_pct(&field, &mask, NdvMode::Central)?,
                mean_disp: mean_disp(&field, &mask)?,
                hd90_flagged: Vec::new(),
                endpoint_error: None,
            }
        }
    };
    if let Some(truth) = &pair.truth {
        let mask = pair.target_labels.as_ref().map(brain_mask);
        m.endpoint_error = Some(endpoint_error(&field, truth, mask.as_deref())?);
    }
    Ok(m)
}

/// Score `n` seeded evaluation pairs. With `parallel`, pairs are loaded in
/// batches and scored concurrently; results keep the pair order either way.
pub fn evaluate(pred: &Predictor, provider: &DataProvider, n: usize, seed: u64, parallel: bool) -> Result<EvalOutcome> {
    let schedule = provider.eval_schedule(n, seed)?;
    let ids: Vec<(String, String)> = schedule.iter().map(|&i| provider.pair_ids(i, true)).collect();
    let batch = if parallel { rayon::current_num_threads().max(1) } else { 1 };
    let mut pairs = Vec::with_capacity(schedule.len());
    for chunk in schedule.chunks(batch) {
        let samples = chunk.iter().map(|&i| provider.pair(i, true)).collect::<Result<Vec<_>>>()?;
        let scored: Vec<Result<PairMetrics>> = if parallel {
            samples.par_iter().map(|p| score(pred, p)).collect()
        } else {
            samples.iter().map(|p| score(pred, p)).collect()
        };
        for m in scored {
            let m = m?;
            log::debug!("{} dsc {:.4} hd90 {:.3}", m.pair_id, m.dsc, m.hd90);
            pairs.push(m);
        }
    }
    Ok(EvalOutcome { report: MetricsReport::from_pairs(pred.name(), &pairs), pairs, pair_hash: pair_hash(&ids) })
}

fn csv_f64(v: f64) -> String {
    if v.is_nan() { "NaN".into() } else { format!("{v}") }
}

/// Write `metrics.csv` (one row per pair) and `report.json`.
pub fn write_eval(dir: &Path, out: &EvalOutcome) -> Result<()> {
    let mut csv = String::from("pair_id,variant,dsc,hd90,sdlogj,ndv_pct,ndv_central_pct,mean_disp,endpoint_error,hd90_flagged\n");
    for p in &out.pairs {
        let flagged: Vec<String> = p.hd90_flagged.iter().map(u32::to_string).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.pair_id,
            p.variant,
            csv_f64(p.dsc),
            csv_f64(p.hd90),
            csv_f64(p.sdlogj),
            csv_f64(p.ndv_pct),
            csv_f64(p.ndv_central_pct),
            csv_f64(p.mean_disp),
            p.endpoint_error.map(csv_f64).unwrap_or_default(),
            flagged.join(";"),
        ));
    }
    write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
    let report = serde_json::json!({ "report": out.report, "pair_hash": out.pair_hash });
    write_file(&dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)
}
