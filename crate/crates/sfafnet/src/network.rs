//! The three-scale multi-input multi-output encoder-decoder: GSFF blocks
//! at widths C/2C/4C, low-resolution inputs merged in through SCABlocks,
//! and four residual-corrected outputs (full, full, half, quarter).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, Init, NafBlock, ScaBlock};
use crate::error::{Error, Result};
use crate::fdgm::{decompose, fixed_gaussian_bank, Fdgm, FilterBank};
use crate::gfm::Gfm;
use crate::tensor::ops;
use crate::tensor::{resample, Padding, Resample, Scalar, Tensor};
use crate::trace::Trace;

/// How each GSFF block obtains its frequency filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Input-dependent banks from the FDGM generator.
    #[default]
    Learned,
    /// Fixed Gaussian bank (ablation baseline).
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Width of the first scale; scales run C, 2C, 4C.
    pub base_channels: usize,
    /// NAFBlocks per GSFF block.
    pub naf_blocks: usize,
    /// Filter bank rows (channel groups) per FDGM.
    pub rows: usize,
    /// Filter kernel size (odd).
    pub kernel: usize,
    #[serde(default)]
    pub filter: FilterMode,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::config(format!(
                "base_channels must be a positive multiple of 4 (GATE bottleneck), got {}",
                self.base_channels
            )));
        }
        if self.rows == 0 || self.base_channels % self.rows != 0 {
            return Err(Error::config(format!(
                "rows {} must divide base_channels {}",
                self.rows, self.base_channels
            )));
        }
        if self.naf_blocks == 0 {
            return Err(Error::config("naf_blocks must be >= 1".to_string()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if let FilterMode::Gaussian { sigma } = self.filter {
            if sigma <= 0.0 {
                return Err(Error::config(format!("gaussian sigma must be > 0, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Smallest full-resolution spatial size the three scales support.
    pub fn min_input_size(&self) -> usize {
        4 * self.kernel.max(2)
    }
}

/// One gated spatial-frequency fusion block: a NAFBlock stack for the
/// spatial stream, a filter bank for the frequency split, and the GFM.
pub struct GsffBlock<T: Scalar> {
    pub nafs: Vec<NafBlock<T>>,
    pub fdgm: Option<Fdgm<T>>,
    pub gfm: Gfm<T>,
}

impl<T: Scalar> GsffBlock<T> {
    fn new<R: Rng>(rng: &mut R, channels: usize, cfg: &ArchConfig) -> Result<Self> {
        let nafs = (0..cfg.naf_blocks).map(|_| NafBlock::new(rng, channels)).collect();
        let fdgm = match cfg.filter {
            FilterMode::Learned => Some(Fdgm::new(rng, channels, cfg.rows, cfg.kernel)?),
            FilterMode::Gaussian { .. } => None,
        };
        Ok(GsffBlock {
            nafs,
            fdgm,
            gfm: Gfm::new(rng, channels)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        fixed_bank: Option<&FilterBank<T>>,
        mut trace: Option<(&mut Trace<T>, &str)>,
    ) -> Result<Tensor<T>> {
        let mut x_s = x.clone();
        for naf in &self.nafs {
            x_s = naf.forward(&x_s)?;
        }
        let freq_in = ops::add(x, &x_s)?;
        let (x_l, x_h) = match (&self.fdgm, fixed_bank) {
            (Some(fdgm), _) => {
                let (bank, f3) = fdgm.generate(&freq_in)?;
                decompose(&f3, &bank)?
            }
            (None, Some(bank)) => decompose(&freq_in, bank)?,
            (None, None) => {
                return Err(Error::config(
                    "GSFF block has no filter generator and no fixed bank".to_string(),
                ))
            }
        };
        if let Some((t, prefix)) = trace.as_mut() {
            t.record(format!("{prefix}.x_s"), &x_s);
            t.record(format!("{prefix}.x_l"), &x_l);
            t.record(format!("{prefix}.x_h"), &x_h);
        }
        match trace {
            Some((t, prefix)) => {
                let name = format!("{prefix}.gfm");
                self.gfm.forward(&x_s, &x_l, &x_h, Some((t, name.as_str())))
            }
            None => self.gfm.forward(&x_s, &x_l, &x_h, None),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, naf) in self.nafs.iter().enumerate() {
            naf.visit(&format!("{prefix}.naf{i}"), f);
        }
        if let Some(fdgm) = &self.fdgm {
            fdgm.visit(&format!("{prefix}.fdgm"), f);
        }
        self.gfm.visit(&format!("{prefix}.gfm"), f);
    }
}

pub struct Model<T: Scalar> {
    pub cfg: ArchConfig,
    pub stem: Conv2d<T>,
    pub enc1: GsffBlock<T>,
    pub down1: Conv2d<T>,
    pub scab2: ScaBlock<T>,
    pub merge2: Conv2d<T>,
    pub enc2: GsffBlock<T>,
    pub down2: Conv2d<T>,
    pub scab3: ScaBlock<T>,
    pub merge3: Conv2d<T>,
    pub bottleneck: GsffBlock<T>,
    pub head3: Conv2d<T>,
    pub up2: Conv2d<T>,
    pub skip2: Conv2d<T>,
    pub dec2: GsffBlock<T>,
    pub head2: Conv2d<T>,
    pub up1: Conv2d<T>,
    pub skip1: Conv2d<T>,
    pub dec1: GsffBlock<T>,
    pub head1: Conv2d<T>,
    pub refine: GsffBlock<T>,
    pub head0: Conv2d<T>,
    pub fixed_bank: Option<FilterBank<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.base_channels;
        let conv = |rng: &mut ChaCha8Rng, cin, cout, k, stride, init| {
            Conv2d::new(rng, cin, cout, k, stride, Padding::Zero, 1, init)
        };
        let fixed_bank = match cfg.filter {
            FilterMode::Gaussian { sigma } => {
                Some(fixed_gaussian_bank(sigma, cfg.rows, cfg.kernel)?)
            }
            FilterMode::Learned => None,
        };
        Ok(Model {
            cfg: cfg.clone(),
            stem: conv(rng, 3, c, 3, 1, Init::FanIn),
            enc1: GsffBlock::new(rng, c, cfg)?,
            down1: conv(rng, c, 2 * c, 3, 2, Init::FanIn),
            scab2: ScaBlock::new(rng, 3),
            merge2: conv(rng, 2 * c + 3, 2 * c, 1, 1, Init::FanIn),
            enc2: GsffBlock::new(rng, 2 * c, cfg)?,
            down2: conv(rng, 2 * c, 4 * c, 3, 2, Init::FanIn),
            scab3: ScaBlock::new(rng, 3),
            merge3: conv(rng, 4 * c + 3, 4 * c, 1, 1, Init::FanIn),
            bottleneck: GsffBlock::new(rng, 4 * c, cfg)?,
            head3: conv(rng, 4 * c, 3, 3, 1, Init::Zero),
            up2: conv(rng, 4 * c, 2 * c, 1, 1, Init::FanIn),
            skip2: conv(rng, 4 * c, 2 * c, 1, 1, Init::FanIn),
            dec2: GsffBlock::new(rng, 2 * c, cfg)?,
            head2: conv(rng, 2 * c, 3, 3, 1, Init::Zero),
            up1: conv(rng, 2 * c, c, 1, 1, Init::FanIn),
            skip1: conv(rng, 2 * c, c, 1, 1, Init::FanIn),
            dec1: GsffBlock::new(rng, c, cfg)?,
            head1: conv(rng, c, 3, 3, 1, Init::Zero),
            refine: GsffBlock::new(rng, c, cfg)?,
            head0: conv(rng, c, 3, 3, 1, Init::Zero),
            fixed_bank,
        })
    }

    /// Restore the four outputs [full, full, half, quarter] for an
    /// N×3×H×W image with H, W divisible by 4.
    pub fn forward(&self, image: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        self.forward_traced(image, None)
    }

    pub fn forward_traced(
        &self,
        image: &Tensor<T>,
        mut trace: Option<&mut Trace<T>>,
    ) -> Result<[Tensor<T>; 4]> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("expected N×3×H×W image, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let min = self.cfg.min_input_size();
        if h % 4 != 0 || w % 4 != 0 || h < min || w < min {
            return Err(Error::dim(format!(
                "spatial size {h}x{w} must be divisible by 4 and at least {min}"
            )));
        }
        let bank = self.fixed_bank.as_ref();

        let half = resample(image, Resample::Down2)?;
        let quarter = resample(&half, Resample::Down2)?;

        let f0 = self.stem.forward(image)?;
        let e1 = self
            .enc1
            .forward(&f0, bank, trace.as_deref_mut().map(|t| (t, "enc1")))?;
        let d1 = self.down1.forward(&e1)?;
        let s2 = self.scab2.forward(&half)?;
        let m2 = self.merge2.forward(&ops::concat(&[d1, s2], 1)?)?;
        let e2 = self
            .enc2
            .forward(&m2, bank, trace.as_deref_mut().map(|t| (t, "enc2")))?;
        let d2 = self.down2.forward(&e2)?;
        let s3 = self.scab3.forward(&quarter)?;
        let m3 = self.merge3.forward(&ops::concat(&[d2, s3], 1)?)?;
        let e3 = self
            .bottleneck
            .forward(&m3, bank, trace.as_deref_mut().map(|t| (t, "bottleneck")))?;
        let out3 = ops::add(&self.head3.forward(&e3)?, &quarter)?;

        let u2 = self.up2.forward(&resample(&e3, Resample::Up2)?)?;
        let k2 = self.skip2.forward(&ops::concat(&[u2, e2], 1)?)?;
        let dd2 = self
            .dec2
            .forward(&k2, bank, trace.as_deref_mut().map(|t| (t, "dec2")))?;
        let out2 = ops::add(&self.head2.forward(&dd2)?, &half)?;

        let u1 = self.up1.forward(&resample(&dd2, Resample::Up2)?)?;
        let k1 = self.skip1.forward(&ops::concat(&[u1, e1], 1)?)?;
        let dd1 = self
            .dec1
            .forward(&k1, bank, trace.as_deref_mut().map(|t| (t, "dec1")))?;
        let out1 = ops::add(&self.head1.forward(&dd1)?, image)?;

        let rf = self
            .refine
            .forward(&dd1, bank, trace.as_deref_mut().map(|t| (t, "refine")))?;
        let residual = self.head0.forward(&rf)?;
        let out0 = ops::add(image, &residual)?;
        Ok([out0, out1, out2, out3])
    }

    /// Stable-order traversal of every trainable tensor.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit("stem", f);
        self.enc1.visit("enc1", f);
        self.down1.visit("down1", f);
        self.scab2.visit("scab2", f);
        self.merge2.visit("merge2", f);
        self.enc2.visit("enc2", f);
        self.down2.visit("down2", f);
        self.scab3.visit("scab3", f);
        self.merge3.visit("merge3", f);
        self.bottleneck.visit("bottleneck", f);
        self.head3.visit("head3", f);
        self.up2.visit("up2", f);
        self.skip2.visit("skip2", f);
        self.dec2.visit("dec2", f);
        self.head2.visit("head2", f);
        self.up1.visit("up1", f);
        self.skip1.visit("skip1", f);
        self.dec1.visit("dec1", f);
        self.head1.visit("head1", f);
        self.refine.visit("refine", f);
        self.head0.visit("head0", f);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Zero every output head so the model becomes the identity mapping.
    pub fn zero_heads(&self) {
        for head in [&self.head0, &self.head1, &self.head2, &self.head3] {
            head.weight.update_data(|d| d.fill(T::zero()));
            head.bias.update_data(|d| d.fill(T::zero()));
        }
    }
}
