//! Python bindings: configuration, the toy model, training, schedule
//! solving, scheduled execution, and the metrics around them.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sparse_sched_core::cache::CacheExecutor;
use sparse_sched_core::config::RunConfig;
use sparse_sched_core::cost::{CostMatrix, StepCostMatrix};
use sparse_sched_core::dp::{solve, ScheduleFile, SparsitySchedule};
use sparse_sched_core::error::Error;
use sparse_sched_core::metrics::{
    heatmap_svg, predict_macs, quality_metrics, schedule_stats,
};
use sparse_sched_core::model::{init_model, make_condition, make_noise, ToyDiTModel};
use sparse_sched_core::trainer::train;
use std::collections::HashMap;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        4 => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// The default run configuration as a JSON document.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// SHA-256 hash of a configuration document in canonical form.
#[pyfunction]
fn config_hash(config_json: &str) -> PyResult<String> {
    Ok(RunConfig::from_json(config_json).map_err(to_py)?.hash())
}

/// One model + cost-tensor workspace driven by a single configuration.
#[pyclass]
struct Pipeline {
    cfg: RunConfig,
    model: ToyDiTModel,
    costs: Option<(CostMatrix, StepCostMatrix)>,
    schedule: Option<SparsitySchedule>,
}

impl Pipeline {
    fn schedule_ref(&self) -> PyResult<&SparsitySchedule> {
        self.schedule.as_ref().ok_or_else(|| {
            PyRuntimeError::new_err("no schedule yet: call train(), solve(), or load_schedule()")
        })
    }

    fn schedule_file(&self) -> PyResult<ScheduleFile> {
        Ok(ScheduleFile::from_schedule(
            self.schedule_ref()?,
            self.cfg.model.num_steps,
            self.cfg.model.sub_layer_names(),
            Some(self.cfg.hash()),
        ))
    }
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => RunConfig::from_json(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        let model = init_model(&cfg.model).map_err(to_py)?;
        Ok(Pipeline {
            cfg,
            model,
            costs: None,
            schedule: None,
        })
    }

    /// The configuration this pipeline runs under, as JSON.
    fn config_json(&self) -> String {
        self.cfg.to_json()
    }

    /// Full-compute reference sample for a seed.
    fn teacher_sample(&self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let cond = make_condition(&self.cfg.model, seed);
        let noise = make_noise(&self.cfg.model, seed);
        Ok(rows(&self.model.sample(&cond, &noise).map_err(to_py)?))
    }

    /// Two-stage cost training; stores the trained costs and the solved
    /// schedule. Returns the per-iteration losses.
    fn train(&mut self) -> PyResult<Vec<f64>> {
        let set = self.cfg.candidate_set().map_err(to_py)?;
        let budget = self.cfg.budget().map_err(to_py)?;
        let out = train(&self.model, &budget, &set, &self.cfg.selector, &self.cfg.train)
            .map_err(to_py)?;
        let losses = out.log.iter().map(|r| r.loss).collect();
        self.costs = Some((out.layer_costs, out.step_costs));
        self.schedule = Some(out.schedule);
        Ok(losses)
    }

    /// Re-solve the schedule from the trained costs at a new cache ratio.
    fn solve(&mut self, ratio: f64) -> PyResult<String> {
        let (layer, _) = self
            .costs
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no trained costs: call train() first"))?;
        let set = self.cfg.candidate_set().map_err(to_py)?;
        let budget = sparse_sched_core::dp::Budget::new(
            ratio,
            layer.slots(),
            set.units_per_slot(),
        )
        .map_err(to_py)?;
        let sched = solve(&layer.rounded_f32(), &budget, &set).map_err(to_py)?;
        self.schedule = Some(sched);
        self.schedule_json()
    }

    /// Current schedule as the JSON file format.
    fn schedule_json(&self) -> PyResult<String> {
        Ok(self.schedule_file()?.to_json())
    }

    /// Install a schedule from the JSON file format.
    fn load_schedule(&mut self, json: &str) -> PyResult<()> {
        let file: ScheduleFile =
            serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.schedule = Some(file.to_schedule().map_err(to_py)?);
        Ok(())
    }

    /// Run the cached sampler under the current schedule.
    fn run_scheduled(&self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let sched = self.schedule_ref()?.clone();
        let cond = make_condition(&self.cfg.model, seed);
        let noise = make_noise(&self.cfg.model, seed);
        let mut exec = CacheExecutor::new(&self.model, sched, self.cfg.selector).map_err(to_py)?;
        Ok(rows(
            &exec
                .run_scheduled_sample(&self.model, &cond, &noise)
                .map_err(to_py)?,
        ))
    }

    /// (PSNR, SSIM) of the scheduled run against the teacher for a seed.
    fn quality(&self, seed: u64) -> PyResult<(f64, f64)> {
        let sched = self.schedule_ref()?.clone();
        let cond = make_condition(&self.cfg.model, seed);
        let noise = make_noise(&self.cfg.model, seed);
        let teacher = self.model.sample(&cond, &noise).map_err(to_py)?;
        let mut exec = CacheExecutor::new(&self.model, sched, self.cfg.selector).map_err(to_py)?;
        let student = exec
            .run_scheduled_sample(&self.model, &cond, &noise)
            .map_err(to_py)?;
        let q = quality_metrics(&teacher, &student).map_err(to_py)?;
        Ok((q.psnr, q.ssim))
    }

    /// Analytic MACs accounting for the current schedule.
    fn macs(&self) -> PyResult<HashMap<String, f64>> {
        let report =
            predict_macs(&self.cfg.model, self.schedule_ref()?, &self.cfg.selector).map_err(to_py)?;
        Ok(HashMap::from([
            ("total".to_string(), report.total as f64),
            ("selector_total".to_string(), report.selector_total as f64),
            ("baseline_total".to_string(), report.baseline_total as f64),
            ("speedup".to_string(), report.speedup),
        ]))
    }

    /// (mean retention, zero-skip slot count) for the current schedule.
    fn stats(&self) -> PyResult<(f64, usize)> {
        let s = schedule_stats(&self.cfg.model, self.schedule_ref()?);
        Ok((s.mean_retention, s.zero_skip_count))
    }

    /// Self-contained SVG heatmap of the current schedule.
    fn heatmap(&self) -> PyResult<String> {
        Ok(heatmap_svg(self.schedule_ref()?))
    }
}

#[pymodule]
fn sparse_sched(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    Ok(())
}
