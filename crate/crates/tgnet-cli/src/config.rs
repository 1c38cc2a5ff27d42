//! Run configuration: one JSON file wires the whole comparison pipeline.
//! Every section has defaults, so a minimal config only names the two
//! network files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgnet::assign::{BPRParams, FWConfig};
use tgnet::demand::GravityParams;
use tgnet::uot::UOTConfig;

use crate::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub reference_network: PathBuf,
    pub target_network: PathBuf,
    /// Optional class-parameter table; the built-in table applies when
    /// omitted.
    #[serde(default)]
    pub class_table: Option<PathBuf>,
    #[serde(default)]
    pub demand: DemandSection,
    #[serde(default)]
    pub bpr: BprSection,
    #[serde(default)]
    pub frank_wolfe: FwSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub uot: UotSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandSection {
    pub zone_size_km: f64,
    pub base_generation_vph: f64,
    pub base_attraction_vph: f64,
    pub gravity: GravityParams,
    pub external_zones: Vec<ExternalZone>,
    pub boost_per_road_vph: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalZone {
    pub row: usize,
    pub col: usize,
    pub major_roads: usize,
}

impl Default for DemandSection {
    fn default() -> Self {
        DemandSection {
            zone_size_km: 1.0,
            base_generation_vph: 1000.0,
            base_attraction_vph: 1000.0,
            gravity: GravityParams {
                k: 0.1,
                alpha: 0.5,
                beta: 0.5,
                gamma: -0.5,
            },
            external_zones: Vec::new(),
            boost_per_road_vph: 5000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BprSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BprSection {
    fn default() -> Self {
        BprSection {
            alpha: 0.48,
            beta: 2.82,
        }
    }
}

impl BprSection {
    pub fn params(&self) -> Result<BPRParams, PipelineError> {
        BPRParams::new(self.alpha, self.beta).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FwSection {
    pub max_iterations: usize,
    pub gap_tolerance: f64,
    pub line_search_tolerance: f64,
}

impl Default for FwSection {
    fn default() -> Self {
        let d = FWConfig::default();
        FwSection {
            max_iterations: d.max_iterations,
            gap_tolerance: d.gap_tolerance,
            line_search_tolerance: d.line_search_tolerance,
        }
    }
}

impl FwSection {
    pub fn config(&self) -> FWConfig {
        FWConfig {
            max_iterations: self.max_iterations,
            gap_tolerance: self.gap_tolerance,
            line_search_tolerance: self.line_search_tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub cell_size_km: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { cell_size_km: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UotSection {
    pub lambda: f64,
    /// Annealing schedule as multiples of the grid cell size; the last
    /// entry is the final epsilon.
    pub epsilon_anneal_cells: Vec<f64>,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub cost_cache_budget: usize,
}

impl Default for UotSection {
    fn default() -> Self {
        UotSection {
            lambda: 0.05,
            epsilon_anneal_cells: vec![0.5, 0.1, 0.02],
            max_iterations: 5000,
            convergence_tol: 1e-6,
            cost_cache_budget: 16_000_000,
        }
    }
}

impl UotSection {
    pub fn config(&self, cell_size_km: f64) -> Result<UOTConfig, PipelineError> {
        if self.epsilon_anneal_cells.is_empty() {
            return Err(PipelineError::Config(
                "uot.epsilon_anneal_cells must not be empty".into(),
            ));
        }
        let mut scales: Vec<f64> = self
            .epsilon_anneal_cells
            .iter()
            .map(|m| m * cell_size_km)
            .collect();
        let epsilon = scales.pop().unwrap();
        let cfg = UOTConfig {
            lambda: self.lambda,
            epsilon,
            epsilon_anneal: scales,
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            cost_cache_budget: self.cost_cache_budget,
        };
        cfg.validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks file references and numeric sections without touching any
    /// network content.
    pub fn validate_shallow(&self) -> Result<(), PipelineError> {
        for (label, path) in [
            ("reference_network", &self.reference_network),
            ("target_network", &self.target_network),
        ] {
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "{label} does not exist: {}",
                    path.display()
                )));
            }
        }
        if let Some(table) = &self.class_table {
            if !table.exists() {
                return Err(PipelineError::Config(format!(
                    "class_table does not exist: {}",
                    table.display()
                )));
            }
        }
        self.bpr.params()?;
        self.frank_wolfe
            .config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.grid.cell_size_km > 0.0) {
            return Err(PipelineError::Config(format!(
                "grid.cell_size_km = {}",
                self.grid.cell_size_km
            )));
        }
        self.uot.config(self.grid.cell_size_km)?;
        self.demand
            .gravity
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.demand.zone_size_km > 0.0) {
            return Err(PipelineError::Config(format!(
                "demand.zone_size_km = {}",
                self.demand.zone_size_km
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"reference_network": "a.json", "target_network": "b.json"}"#,
        )
        .unwrap();
        assert_eq!(cfg.bpr.alpha, 0.48);
        assert_eq!(cfg.bpr.beta, 2.82);
        assert_eq!(cfg.frank_wolfe.max_iterations, 500);
        assert_eq!(cfg.grid.cell_size_km, 0.05);
        assert_eq!(cfg.uot.lambda, 0.05);
        assert_eq!(cfg.demand.boost_per_road_vph, 5000.0);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn uot_section_builds_annealed_config() {
        let section = UotSection::default();
        let cfg = section.config(0.05).unwrap();
        assert_eq!(cfg.epsilon_anneal.len(), 2);
        assert!((cfg.epsilon_anneal[0] - 0.025).abs() < 1e-15);
        assert!((cfg.epsilon_anneal[1] - 0.005).abs() < 1e-15);
        assert!((cfg.epsilon - 0.001).abs() < 1e-15);
    }
}
