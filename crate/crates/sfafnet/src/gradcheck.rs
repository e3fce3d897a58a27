//! Named finite-difference gradient checks covering every differentiable
//! operation and the full tiny network. All checks run in f64 with
//! central differences (h = 1e-4) at relative tolerance 1e-3.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{sca, simple_gate, Conv2d, Init, NafBlock};
use crate::error::Result;
use crate::fdgm::{decompose, Fdgm};
use crate::gfm::{Cam, Gate, Gfm};
use crate::loss::{charbonnier, edge_loss, freq_loss, total_loss, LossConfig};
use crate::network::{ArchConfig, FilterMode, Model};
use crate::tensor::ops;
use crate::tensor::{
    conv2d, gradcheck, layer_norm, rand_uniform, Padding, Tensor,
};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_uniform::<f64, _>(rng, shape, -1.0, 1.0).requires_grad(true)
}

fn run_check(
    results: &mut Vec<CheckResult>,
    module: &'static str,
    name: &'static str,
    inputs: &[Tensor<f64>],
    max_coords: usize,
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<()> {
    let report = gradcheck(f, inputs, FD_STEP, max_coords, 0xC0FFEE)?;
    results.push(CheckResult {
        module,
        name,
        checked: report.checked,
        max_rel_err: report.max_rel_err,
        pass: report.passes(FD_TOL),
    });
    Ok(())
}

/// Run every check whose module or name contains `filter` (all when None).
pub fn run_suite(filter: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let wanted = |module: &str, name: &str| match filter {
        Some(f) => module.contains(f) || name.contains(f),
        None => true,
    };
    let rng = &mut ChaCha8Rng::seed_from_u64(2024);

    if wanted("tensor_core", "conv2d") {
        let ins = [
            uniform(rng, &[2, 3, 6, 6]),
            uniform(rng, &[4, 3, 3, 3]),
            uniform(rng, &[4]),
        ];
        run_check(&mut out, "tensor_core", "conv2d_zero_pad", &ins, 20, &|t| {
            let y = conv2d(&t[0], &t[1], Some(&t[2]), 1, Padding::Zero, 1)?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
        let ins = [
            uniform(rng, &[1, 4, 6, 6]),
            uniform(rng, &[4, 2, 3, 3]),
            uniform(rng, &[4]),
        ];
        run_check(&mut out, "tensor_core", "conv2d_reflect_grouped_strided", &ins, 20, &|t| {
            let y = conv2d(&t[0], &t[1], Some(&t[2]), 2, Padding::Reflect, 2)?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("tensor_core", "layer_norm") {
        let ins = [uniform(rng, &[2, 4, 3, 3]), uniform(rng, &[4]), uniform(rng, &[4])];
        run_check(&mut out, "tensor_core", "layer_norm", &ins, 20, &|t| {
            let y = layer_norm(&t[0], &t[1], &t[2], 1e-6)?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("tensor_core", "softmax") {
        let ins = [uniform(rng, &[2, 5, 4])];
        let w = rand_uniform::<f64, _>(rng, &[2, 5, 4], -1.0, 1.0);
        run_check(&mut out, "tensor_core", "softmax", &ins, 20, &|t| {
            ops::sum(&ops::mul(&ops::softmax(&t[0], 1)?, &w)?)
        })?;
    }
    if wanted("nn_blocks", "simple_gate") {
        let ins = [uniform(rng, &[1, 6, 4, 4])];
        run_check(&mut out, "nn_blocks", "simple_gate", &ins, 20, &|t| {
            let y = simple_gate(&t[0])?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("nn_blocks", "sca") {
        let conv = Conv2d::new(rng, 4, 4, 1, 1, Padding::Zero, 1, Init::FanIn);
        let ins = [
            uniform(rng, &[1, 4, 4, 4]),
            conv.weight.clone(),
            conv.bias.clone(),
        ];
        run_check(&mut out, "nn_blocks", "sca", &ins, 20, &|t| {
            let y = sca(&t[0], &conv)?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("nn_blocks", "nafblock") {
        let mut block = NafBlock::new(rng, 4);
        // Wake the zero-initialized projections so every path carries signal.
        block.ffn_project = Conv2d::new(rng, 4, 4, 1, 1, Padding::Zero, 1, Init::FanIn);
        block.sca_block.project = Conv2d::new(rng, 4, 4, 1, 1, Padding::Zero, 1, Init::FanIn);
        let ins = [
            uniform(rng, &[1, 4, 5, 5]),
            block.ln1.gamma.clone(),
            block.sca_block.dw.weight.clone(),
            block.ffn_expand.weight.clone(),
        ];
        run_check(&mut out, "nn_blocks", "nafblock", &ins, 16, &|t| {
            let y = block.forward(&t[0])?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("fdgm", "fdgm") {
        let fdgm = Fdgm::new(rng, 4, 2, 3)?;
        let ins = [
            uniform(rng, &[1, 4, 6, 6]),
            fdgm.expand.weight.clone(),
            fdgm.expand.bias.clone(),
            fdgm.dw.weight.clone(),
            fdgm.dw.bias.clone(),
        ];
        run_check(&mut out, "fdgm", "fdgm_generate_decompose", &ins, 12, &|t| {
            let (bank, f3) = fdgm.generate(&t[0])?;
            let (x_l, x_h) = decompose(&f3, &bank)?;
            ops::sum(&ops::add(&ops::mul(&x_l, &x_l)?, &x_h)?)
        })?;
    }
    if wanted("gfm", "gate_reweight") {
        let gate = Gate::new(rng, 4)?;
        let ins = [
            uniform(rng, &[1, 4, 4, 4]),
            gate.a1.weight.clone(),
            gate.b1.weight.clone(),
            gate.b2.bias.clone(),
        ];
        run_check(&mut out, "gfm", "gate_reweight", &ins, 16, &|t| {
            let y = gate.forward(&t[0])?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("gfm", "cam_fuse") {
        let cam = Cam::new(rng, 4);
        let ins = [
            uniform(rng, &[1, 4, 4, 4]),
            uniform(rng, &[1, 4, 4, 4]),
            cam.q.weight.clone(),
            cam.va.weight.clone(),
        ];
        run_check(&mut out, "gfm", "cam_fuse", &ins, 16, &|t| {
            let y = cam.forward(&t[0], &t[1])?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("gfm", "adaptive_fuse") {
        let gfm = Gfm::new(rng, 4)?;
        let ins = [
            uniform(rng, &[1, 4, 4, 4]),
            uniform(rng, &[1, 4, 4, 4]),
            uniform(rng, &[1, 4, 4, 4]),
            gfm.weight_proj.weight.clone(),
            gfm.out_proj.weight.clone(),
        ];
        run_check(&mut out, "gfm", "adaptive_fuse", &ins, 16, &|t| {
            let y = gfm.adaptive_fuse(&t[0], &t[1], &t[2])?;
            ops::sum(&ops::mul(&y, &y)?)
        })?;
    }
    if wanted("losses", "charbonnier") {
        // The Charbonnier kink has curvature scale eps; probing it with
        // central differences needs eps well above h times the stencil
        // gain, so the checks use eps = 0.01.
        let target = rand_uniform::<f64, _>(rng, &[1, 2, 4, 4], 0.0, 1.0);
        let ins = [uniform(rng, &[1, 2, 4, 4])];
        run_check(&mut out, "losses", "charbonnier", &ins, 32, &|t| {
            charbonnier(&t[0], &target, 0.01)
        })?;
        let target2 = rand_uniform::<f64, _>(rng, &[1, 2, 4, 4], 0.0, 1.0);
        let ins = [uniform(rng, &[1, 2, 4, 4])];
        run_check(&mut out, "losses", "edge_loss", &ins, 32, &|t| {
            edge_loss(&t[0], &target2, 0.01)
        })?;
        let target3 = rand_uniform::<f64, _>(rng, &[1, 2, 4, 4], 0.0, 1.0);
        let ins = [uniform(rng, &[1, 2, 4, 4])];
        run_check(&mut out, "losses", "freq_loss", &ins, 32, &|t| {
            freq_loss(&t[0], &target3)
        })?;
    }
    if wanted("network", "tiny_network") {
        let cfg = ArchConfig {
            base_channels: 4,
            naf_blocks: 1,
            rows: 2,
            kernel: 3,
            filter: FilterMode::Learned,
        };
        let model = Model::<f64>::new(&cfg, 2024)?;
        let image = rand_uniform::<f64, _>(rng, &[1, 3, 16, 16], 0.0, 1.0).requires_grad(true);
        let targets: Vec<Tensor<f64>> = [(16usize, 16usize), (16, 16), (8, 8), (4, 4)]
            .iter()
            .map(|(h, w)| rand_uniform::<f64, _>(rng, &[1, 3, *h, *w], 0.0, 1.0))
            .collect();
        let loss_cfg = LossConfig::default();
        // The input plus a spread of parameter tensors across the depth;
        // the handles alias the model's storage, so perturbing them
        // perturbs the network.
        let mut check_inputs = vec![image];
        for (i, (_, t)) in model.named_params().into_iter().enumerate() {
            if i % 17 == 3 {
                check_inputs.push(t);
            }
        }
        let forward = move |t: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let outputs = model.forward(&t[0])?;
            Ok(total_loss(&outputs, &targets, &loss_cfg)?.0)
        };
        run_check(&mut out, "network", "tiny_network", &check_inputs, 4, &forward)?;
    }
    Ok(out)
}
