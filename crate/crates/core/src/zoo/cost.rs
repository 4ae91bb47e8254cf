use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::count_specs;
use crate::tensor::Scalar;

use super::model::{layout, ModelGraph};
use super::spec::Arch;

/// Counting convention tag carried by every report.
pub const MACS_CONVENTION: &str = "param-layers: conv k*k*cin/groups*cout*ho*wo, linear in*out*positions; \
attention score/value products, norms and activations excluded";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input_size: usize,
    pub convention: String,
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    fn from_modules(model: String, input_size: usize, modules: Vec<ModuleCost>) -> Self {
        let total_params = modules.iter().map(|m| m.params).sum();
        let total_macs = modules.iter().map(|m| m.macs).sum();
        CostReport {
            model,
            input_size,
            convention: MACS_CONVENTION.to_string(),
            modules,
            total_params,
            total_macs,
        }
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn macs_g(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// `module,params,macs` rows followed by a `total` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["module", "params", "macs"]).map_err(err)?;
        for m in &self.modules {
            w.write_record([m.module.clone(), m.params.to_string(), m.macs.to_string()])
                .map_err(err)?;
        }
        w.write_record(["total".to_string(), self.total_params.to_string(), self.total_macs.to_string()])
            .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let width = self.modules.iter().map(|m| m.module.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{} @ {}\n", self.model, self.input_size);
        s.push_str(&format!("{:<width$}  {:>14}  {:>18}\n", "module", "params", "MACs"));
        for m in &self.modules {
            s.push_str(&format!("{:<width$}  {:>14}  {:>18}\n", m.module, m.params, m.macs));
        }
        s.push_str(&format!(
            "{:<width$}  {:>14}  {:>18}\n",
            "total", self.total_params, self.total_macs
        ));
        s.push_str(&format!("= {:.2}M params, {:.2}G MACs\n", self.params_m(), self.macs_g()));
        s
    }
}

/// Params and MACs straight from the structure; nothing is allocated.
pub fn analyze(arch: &Arch, input_size: usize) -> Result<CostReport> {
    let mods = layout(arch, input_size)?;
    let modules = mods
        .into_iter()
        .map(|m| ModuleCost {
            params: count_specs(&m.specs),
            macs: m.macs,
            module: m.name,
        })
        .collect();
    Ok(CostReport::from_modules(arch.name(), input_size, modules))
}

fn owned_by(module: &str, name: &str) -> bool {
    name == module || (name.starts_with(module) && name.as_bytes().get(module.len()) == Some(&b'.'))
}

/// Parameter counts summed over the model's stored tensors, grouped by
/// module. MACs are given at the model's own input size.
pub fn count_params<T: Scalar>(model: &ModelGraph<T>) -> Result<CostReport> {
    let mods = model.layout()?;
    let mut modules = Vec::with_capacity(mods.len());
    let mut seen = 0usize;
    for m in mods {
        let mut params = 0u64;
        for (name, p) in model.params.iter() {
            if owned_by(&m.name, name) {
                seen += 1;
                if !p.buffer {
                    params += p.value.numel() as u64;
                }
            }
        }
        modules.push(ModuleCost {
            module: m.name,
            params,
            macs: m.macs,
        });
    }
    if seen != model.params.len() {
        return Err(Error::Contract(format!(
            "{} stored tensors are not owned by any module",
            model.params.len() - seen
        )));
    }
    Ok(CostReport::from_modules(model.arch.name(), model.input_size, modules))
}

/// MACs at `input_size` (which may differ from the model's native size).
pub fn count_macs<T: Scalar>(model: &ModelGraph<T>, input_size: usize) -> Result<CostReport> {
    analyze(&model.arch, input_size)
}
