// scratch: overfit one fixed batch
use sfafnet::data::{synth_texture, make_blur_pair, BlurKind, target_pyramid};
use sfafnet::network::{ArchConfig, FilterMode, Model};
use sfafnet::trainer::{AdamState, adam_step, TrainConfig};
use sfafnet::loss::{total_loss, LossConfig};
use sfafnet::tensor::{Tensor, backward};

fn main() {
    let cfg = ArchConfig { base_channels: 4, naf_blocks: 1, rows: 2, kernel: 3, filter: FilterMode::Learned };
    let model = Model::<f32>::new(&cfg, 4).unwrap();
    let sharp = synth_texture(11, 0, 16);
    let pair = make_blur_pair(&sharp, BlurKind::Gaussian { sigma: 1.5 }, 0.0, 0, "x").unwrap();
    let pyr = target_pyramid(&pair.sharp).unwrap();
    let to_t = |img: &sfafnet::data::Image| {
        let d: Vec<f32> = img.data.clone();
        Tensor::<f32>::from_vec(d, &[1, 3, img.h, img.w]).unwrap()
    };
    let input = to_t(&pair.degraded);
    let targets: Vec<Tensor<f32>> = pyr.iter().map(to_t).collect();
    let params = model.named_params();
    let mut state = AdamState::new(&params);
    let tc = TrainConfig { lr_init: 1e-3, lr_final: 1e-3, total_steps: 200, ..TrainConfig::default() };
    for step in 0..200 {
        let outs = model.forward(&input).unwrap();
        let (loss, parts) = total_loss(&outs, &targets, &LossConfig::default()).unwrap();
        if step % 20 == 0 {
            println!("step {step:3} loss {:.5} char {:.5} edge {:.5} freq {:.5}", loss.item(), parts.charbonnier, parts.edge, parts.freq);
        }
        model.zero_grads();
        backward(&loss).unwrap();
        adam_step(&params, &mut state, 1e-3, &tc);
    }
    let outs = model.forward(&input).unwrap();
    let (loss, _) = total_loss(&outs, &targets, &LossConfig::default()).unwrap();
    println!("final loss {:.5}", loss.item());
}
