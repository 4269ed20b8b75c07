use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{gemm_flops, reset_gemm_flops, Var};
use crate::error::Result;
use crate::models::{RegistrationModel, VariantConfig, VariantName};
use crate::nn::Ctx;
use crate::tensor::{Dims3, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub variant: String,
    pub extents: Dims3,
    pub width_divisor: usize,
    pub parameters: usize,
    /// Multiply-add FLOPs of the matrix products in one forward pass.
    pub gemm_gflops: f64,
    pub forward_seconds: f64,
}

/// Parameter count, forward FLOPs and forward time of each variant at the
/// given extents and width divisor.
pub fn profile(variants: &[VariantName], extents: Dims3, width_divisor: usize) -> Result<Vec<ProfileRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let cfg = VariantConfig::desk(v, extents, width_divisor);
        let model = RegistrationModel::build(&cfg)?;
        let shape = extents.shape_with_channels(1);
        let ramp = |k: f64| {
            let n = extents.len();
            Tensor::new(shape.clone(), (0..n).map(|i| ((i as f64 * k).sin() + 1.0) / 2.0).collect())
        };
        let (t, s) = (Var::constant(ramp(0.37)?), Var::constant(ramp(0.41)?));
        reset_gemm_flops();
        let start = Instant::now();
        model.forward(&Ctx::eval(&model.params), &t, &s)?;
        let secs = start.elapsed().as_secs_f64();
        rows.push(ProfileRow {
            variant: v.as_str().to_string(),
            extents,
            width_divisor,
            parameters: model.count_parameters(),
            gemm_gflops: gemm_flops() as f64 / 1e9,
            forward_seconds: secs,
        });
    }
    Ok(rows)
}
