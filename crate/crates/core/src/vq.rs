//! Vector-quantized autoencoder: conv encoder, codebook nearest-neighbour
//! quantization with a straight-through estimator, conv decoder, and the
//! dictionary/commitment training losses.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::conv::Pad;
use crate::tensor::init;
use crate::tensor::io::{read_tensor, write_tensor, CountingReader};
use crate::Tensor;

pub const VQ_MAGIC: &[u8; 4] = b"VQCK";
const VQ_VERSION: u32 = 1;

/// K x d_c table of discrete-token embeddings.
pub struct Codebook {
    table: Tensor,
}

impl Codebook {
    /// Fresh trainable codebook, rows uniform in [-1/K, 1/K].
    pub fn new<R: Rng>(rng: &mut R, k: usize, dim: usize) -> Result<Codebook> {
        if k < 2 || dim == 0 {
            return Err(Error::invalid(
                "codebook",
                format!("need K >= 2 and d_c >= 1, got K={k}, d_c={dim}"),
            ));
        }
        let bound = 1.0 / k as f64;
        let table = init::uniform(rng, &[k, dim], -bound, bound).trainable();
        Ok(Codebook { table })
    }

    /// Wrap an existing (K,d_c) tensor.
    pub fn from_tensor(table: Tensor) -> Result<Codebook> {
        if table.rank() != 2 || table.shape()[0] < 2 {
            return Err(Error::invalid(
                "codebook",
                format!("expected (K>=2, d_c) table, got {:?}", table.shape()),
            ));
        }
        Ok(Codebook { table })
    }

    pub fn size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }
}

/// Output of `quantize`: integer grid indices, the gathered codebook rows,
/// and the straight-through tensor whose value is `z_q` but whose gradient
/// flows to `z_e` unchanged.
pub struct QuantizeResult {
    /// One index in 0..K per grid cell, row-major over the input cells.
    pub indices: Vec<u32>,
    /// Gathered rows, shape (cells, d_c). Gradients reach the codebook.
    pub z_q: Tensor,
    /// Same shape as the `z_e` argument.
    pub ste_output: Tensor,
}

/// Nearest-neighbour quantization of a (..., d_c) grid against the
/// codebook. Ties break toward the lowest index.
pub fn quantize(z_e: &Tensor, codebook: &Codebook) -> Result<QuantizeResult> {
    let dc = codebook.dim();
    if z_e.shape().last() != Some(&dc) {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: z_e.shape().to_vec(),
            rhs: codebook.tensor().shape().to_vec(),
        });
    }
    let cells = z_e.numel() / dc;
    let k = codebook.size();
    let mut indices = Vec::with_capacity(cells);
    {
        let zd = z_e.data();
        let cb = codebook.tensor().data();
        for cell in 0..cells {
            let z = &zd[cell * dc..(cell + 1) * dc];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let row = &cb[j * dc..(j + 1) * dc];
                let mut d = 0.0;
                for (a, b) in z.iter().zip(row) {
                    let t = a - b;
                    d += t * t;
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            indices.push(best as u32);
        }
    }
    let idx_usize: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
    let z_q = codebook.tensor().gather_rows(&idx_usize)?;
    let z_e_rows = z_e.reshape(&[cells, dc])?;
    let ste = Tensor::straight_through(&z_e_rows, &z_q)?.reshape(z_e.shape())?;
    Ok(QuantizeResult {
        indices,
        z_q,
        ste_output: ste,
    })
}

/// True iff the gradient reaching `z_e` through the straight-through path
/// equals the gradient that lands on the quantizer output, elementwise
/// exactly. A frozen `z_e` is vacuously satisfied provided nothing leaked
/// upstream.
pub fn straight_through_grad_property(
    loss: &Tensor,
    z_e: &Tensor,
    ste_output: &Tensor,
) -> Result<bool> {
    z_e.zero_grad();
    ste_output.zero_grad();
    loss.backward()?;
    if !z_e.tracked() {
        return Ok(z_e.grad().is_none());
    }
    match (z_e.grad(), ste_output.grad()) {
        (Some(a), Some(b)) => Ok(a == b),
        _ => Ok(false),
    }
}

/// The three VQ-VAE loss terms and their sum.
pub struct VqLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub dict: Tensor,
    pub commit: Tensor,
}

/// recon = mse(x_hat, x); dict = ||sg[z_e] - v||^2 (codebook only);
/// commit = beta * ||z_e - sg[v]||^2 (encoder only).
pub fn vqvae_loss(
    x: &Tensor,
    x_hat: &Tensor,
    z_e: &Tensor,
    v_selected: &Tensor,
    beta: f64,
) -> Result<VqLoss> {
    if beta < 0.0 {
        return Err(Error::invalid("vqvae_loss", "beta must be non-negative"));
    }
    if z_e.numel() != v_selected.numel() {
        return Err(Error::ShapeMismatch {
            op: "vqvae_loss",
            lhs: z_e.shape().to_vec(),
            rhs: v_selected.shape().to_vec(),
        });
    }
    let flat = [z_e.numel()];
    let ze_flat = z_e.reshape(&flat)?;
    let v_flat = v_selected.reshape(&flat)?;
    let recon = x_hat.mse(x)?;
    let dict = ze_flat.detach().sub(&v_flat)?.sqr()?.sum_all()?;
    let commit = ze_flat.sub(&v_flat.detach())?.sqr()?.sum_all()?.scale(beta)?;
    let total = recon.add(&dict)?.add(&commit)?;
    Ok(VqLoss {
        total,
        recon,
        dict,
        commit,
    })
}

/// exp(entropy) of a codebook usage histogram; 1 means collapse, K means
/// uniform usage.
pub fn codebook_perplexity(histogram: &[u64]) -> Result<f64> {
    let n: u64 = histogram.iter().sum();
    if histogram.is_empty() || n == 0 {
        return Err(Error::invalid("perplexity", "empty histogram"));
    }
    let mut entropy = 0.0;
    for &c in histogram {
        if c > 0 {
            let p = c as f64 / n as f64;
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

// ---------------------------------------------------------------------------
// Model

/// Architecture of the VQ autoencoder. The downsampling factor is
/// 2^(stages-1); it must equal the ViT patch size so one code cell
/// corresponds to one image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct VqVaeConfig {
    pub codebook_size: usize,
    pub embed_dim: usize,
    /// Residual blocks per resolution stage; downsampling sits between
    /// stages.
    pub resblocks_per_stage: Vec<usize>,
    pub base_channels: usize,
    pub in_channels: usize,
    pub beta: f64,
}

impl VqVaeConfig {
    /// Desk-scale default: K=64, d_c=32, factor-8 encoder for 32x32 inputs.
    pub fn desk() -> VqVaeConfig {
        VqVaeConfig {
            codebook_size: 64,
            embed_dim: 32,
            resblocks_per_stage: vec![1, 1, 1, 1],
            base_channels: 16,
            in_channels: 3,
            beta: 0.25,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.resblocks_per_stage.len() - 1)
    }

    /// Channel width per stage: base * (1,1,2,2,4,4,...).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels * (1 << (stage / 2))
    }

    fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::invalid("vq_config", "codebook size must be >= 2"));
        }
        if self.embed_dim == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("vq_config", "zero dimension in config"));
        }
        if self.resblocks_per_stage.is_empty() {
            return Err(Error::invalid("vq_config", "need at least one stage"));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid("vq_config", "beta must be non-negative"));
        }
        Ok(())
    }
}

struct ConvLayer {
    w: Tensor,
    b: Tensor,
}

impl ConvLayer {
    fn new<R: Rng>(rng: &mut R, kh: usize, kw: usize, cin: usize, cout: usize) -> ConvLayer {
        let w = init::he_normal(rng, &[kh, kw, cin, cout], kh * kw * cin).trainable();
        let b = Tensor::zeros(&[cout]).trainable();
        ConvLayer { w, b }
    }

    fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        x.conv2d(&self.w, &self.b, stride, Pad::Same)
    }

    fn forward_transpose(&self, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        x.conv2d_transpose(&self.w, &self.b, stride, pad)
    }
}

/// Pre-activation residual unit: x + conv3x3(gelu(x)).
struct ResBlock {
    conv: ConvLayer,
}

impl ResBlock {
    fn new<R: Rng>(rng: &mut R, channels: usize) -> ResBlock {
        ResBlock {
            conv: ConvLayer::new(rng, 3, 3, channels, channels),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.conv.forward(&x.gelu()?, 1)?)
    }
}

/// Conv encoder + codebook + mirror decoder with a quantization bottleneck.
pub struct VqVae {
    pub config: VqVaeConfig,
    stem: ConvLayer,
    enc_stages: Vec<(Vec<ResBlock>, Option<ConvLayer>)>,
    enc_out: ConvLayer,
    pub codebook: Codebook,
    dec_in: ConvLayer,
    dec_stages: Vec<(Vec<ResBlock>, Option<ConvLayer>)>,
    dec_out: ConvLayer,
}

/// One full autoencoding pass.
pub struct VqForward {
    pub z_e: Tensor,
    pub quant: QuantizeResult,
    pub x_hat: Tensor,
}

impl VqVae {
    pub fn new<R: Rng>(config: VqVaeConfig, rng: &mut R) -> Result<VqVae> {
        config.validate()?;
        let stages = config.resblocks_per_stage.len();
        let stem = ConvLayer::new(rng, 3, 3, config.in_channels, config.stage_channels(0));
        let mut enc_stages = Vec::new();
        for s in 0..stages {
            let ch = config.stage_channels(s);
            let blocks = (0..config.resblocks_per_stage[s])
                .map(|_| ResBlock::new(rng, ch))
                .collect();
            let down = (s + 1 < stages)
                .then(|| ConvLayer::new(rng, 3, 3, ch, config.stage_channels(s + 1)));
            enc_stages.push((blocks, down));
        }
        let top = config.stage_channels(stages - 1);
        let enc_out = ConvLayer::new(rng, 3, 3, top, config.embed_dim);
        let codebook = Codebook::new(rng, config.codebook_size, config.embed_dim)?;
        let dec_in = ConvLayer::new(rng, 3, 3, config.embed_dim, top);
        let mut dec_stages = Vec::new();
        for s in (0..stages).rev() {
            let ch = config.stage_channels(s);
            let blocks = (0..config.resblocks_per_stage[s])
                .map(|_| ResBlock::new(rng, ch))
                .collect();
            let up = (s > 0).then(|| ConvLayer::new(rng, 4, 4, ch, config.stage_channels(s - 1)));
            dec_stages.push((blocks, up));
        }
        let dec_out = ConvLayer::new(rng, 3, 3, config.stage_channels(0), config.in_channels);
        Ok(VqVae {
            config,
            stem,
            enc_stages,
            enc_out,
            codebook,
            dec_in,
            dec_stages,
            dec_out,
        })
    }

    /// Image batch (B,H,W,C) to continuous code grid (B,H/P,W/P,d_c).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[3] != self.config.in_channels {
            return Err(Error::invalid(
                "encode",
                format!("expected (B,H,W,{}) input, got {:?}", self.config.in_channels, x.shape()),
            ));
        }
        let f = self.config.downsample_factor();
        if x.shape()[1] % f != 0 || x.shape()[2] % f != 0 {
            return Err(Error::invalid(
                "encode",
                format!("spatial dims {:?} not divisible by downsample factor {f}", &x.shape()[1..3]),
            ));
        }
        let mut h = self.stem.forward(x, 1)?;
        for (blocks, down) in &self.enc_stages {
            for b in blocks {
                h = b.forward(&h)?;
            }
            if let Some(d) = down {
                h = d.forward(&h, 2)?;
            }
        }
        self.enc_out.forward(&h, 1)
    }

    /// Code grid (B,h,w,d_c) back to an image in [0,1] via a final sigmoid.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 4 || z.shape()[3] != self.config.embed_dim {
            return Err(Error::invalid(
                "decode",
                format!("expected (B,h,w,{}) grid, got {:?}", self.config.embed_dim, z.shape()),
            ));
        }
        let mut h = self.dec_in.forward(z, 1)?;
        for (blocks, up) in &self.dec_stages {
            for b in blocks {
                h = b.forward(&h)?;
            }
            if let Some(u) = up {
                h = u.forward_transpose(&h, 2, 1)?;
            }
        }
        self.dec_out.forward(&h, 1)?.sigmoid()
    }

    pub fn forward(&self, x: &Tensor) -> Result<VqForward> {
        let z_e = self.encode(x)?;
        let quant = quantize(&z_e, &self.codebook)?;
        let x_hat = self.decode(&quant.ste_output)?;
        Ok(VqForward { z_e, quant, x_hat })
    }

    /// Named parameters in the fixed checkpoint order: stem, encoder stages
    /// (blocks then downsample), encoder head, codebook, decoder head,
    /// decoder stages, output conv. Weight before bias throughout.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        fn push(out: &mut Vec<(String, Tensor)>, name: String, layer: &ConvLayer) {
            out.push((format!("{name}.w"), layer.w.clone()));
            out.push((format!("{name}.b"), layer.b.clone()));
        }
        let mut out = Vec::new();
        push(&mut out, "enc.stem".into(), &self.stem);
        for (s, (blocks, down)) in self.enc_stages.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                push(&mut out, format!("enc.stage{s}.res{i}"), &b.conv);
            }
            if let Some(d) = down {
                push(&mut out, format!("enc.stage{s}.down"), d);
            }
        }
        push(&mut out, "enc.out".into(), &self.enc_out);
        out.push(("codebook".into(), self.codebook.tensor().clone()));
        push(&mut out, "dec.in".into(), &self.dec_in);
        for (s, (blocks, up)) in self.dec_stages.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                push(&mut out, format!("dec.stage{s}.res{i}"), &b.conv);
            }
            if let Some(u) = up {
                push(&mut out, format!("dec.stage{s}.up"), u);
            }
        }
        push(&mut out, "dec.out".into(), &self.dec_out);
        out
    }

    /// Encoder and decoder parameters only (everything but the codebook).
    pub fn autoencoder_params(&self) -> Vec<(String, Tensor)> {
        self.params()
            .into_iter()
            .filter(|(n, _)| n != "codebook")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(VQ_MAGIC)?;
        w.write_all(&VQ_VERSION.to_le_bytes())?;
        let c = &self.config;
        w.write_all(&(c.codebook_size as u32).to_le_bytes())?;
        w.write_all(&(c.embed_dim as u32).to_le_bytes())?;
        w.write_all(&(c.resblocks_per_stage.len() as u32).to_le_bytes())?;
        for &r in &c.resblocks_per_stage {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        w.write_all(&(c.base_channels as u32).to_le_bytes())?;
        w.write_all(&(c.in_channels as u32).to_le_bytes())?;
        w.write_all(&c.beta.to_le_bytes())?;
        let params = self.params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (_, t) in &params {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, trainable: bool) -> Result<VqVae> {
        let f = std::fs::File::open(path)?;
        Self::read(&mut CountingReader::new(std::io::BufReader::new(f)), trainable)
    }

    pub fn read<R: Read>(r: &mut CountingReader<R>, trainable: bool) -> Result<VqVae> {
        r.expect_magic(VQ_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != VQ_VERSION {
            return Err(Error::Format {
                offset: r.offset(),
                msg: format!("unsupported VQCK version {version}"),
            });
        }
        let codebook_size = r.read_u32("codebook size")? as usize;
        let embed_dim = r.read_u32("embed dim")? as usize;
        let n_stages = r.read_u32("stage count")? as usize;
        if n_stages == 0 || n_stages > 16 {
            return Err(Error::Format {
                offset: r.offset(),
                msg: format!("implausible stage count {n_stages}"),
            });
        }
        let mut resblocks_per_stage = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            resblocks_per_stage.push(r.read_u32("resblock count")? as usize);
        }
        let base_channels = r.read_u32("base channels")? as usize;
        let in_channels = r.read_u32("in channels")? as usize;
        let beta = r.read_f64("beta")?;
        let config = VqVaeConfig {
            codebook_size,
            embed_dim,
            resblocks_per_stage,
            base_channels,
            in_channels,
            beta,
        };
        // Structure from config, then overwrite values in checkpoint order.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let model = VqVae::new(config, &mut rng)?;
        let n_tensors = r.read_u32("tensor count")? as usize;
        let params = model.params();
        if n_tensors != params.len() {
            return Err(Error::Format {
                offset: r.offset(),
                msg: format!("expected {} tensors, file has {n_tensors}", params.len()),
            });
        }
        for (name, t) in &params {
            let loaded = read_tensor(r)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format {
                    offset: r.offset(),
                    msg: format!(
                        "tensor `{name}` shape {:?} does not match model {:?}",
                        loaded.shape(),
                        t.shape()
                    ),
                });
            }
            t.set_data(&loaded.data());
        }
        if trainable {
            Ok(model)
        } else {
            Ok(model.frozen())
        }
    }

    /// Rebuild this model with every parameter as a frozen leaf.
    fn frozen(self) -> VqVae {
        fn freeze_conv(l: &ConvLayer) -> ConvLayer {
            ConvLayer {
                w: l.w.detach(),
                b: l.b.detach(),
            }
        }
        VqVae {
            config: self.config.clone(),
            stem: freeze_conv(&self.stem),
            enc_stages: self
                .enc_stages
                .iter()
                .map(|(blocks, down)| {
                    (
                        blocks
                            .iter()
                            .map(|b| ResBlock {
                                conv: freeze_conv(&b.conv),
                            })
                            .collect(),
                        down.as_ref().map(freeze_conv),
                    )
                })
                .collect(),
            enc_out: freeze_conv(&self.enc_out),
            codebook: Codebook {
                table: self.codebook.table.detach(),
            },
            dec_in: freeze_conv(&self.dec_in),
            dec_stages: self
                .dec_stages
                .iter()
                .map(|(blocks, up)| {
                    (
                        blocks
                            .iter()
                            .map(|b| ResBlock {
                                conv: freeze_conv(&b.conv),
                            })
                            .collect(),
                        up.as_ref().map(freeze_conv),
                    )
                })
                .collect(),
            dec_out: freeze_conv(&self.dec_out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn quantize_forced_argmin() {
        let cb = Codebook::from_tensor(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap();
        let q = quantize(&t(&[0.9, 0.1], &[1, 2]), &cb).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.z_q.to_vec(), vec![1.0, 0.0]);
        assert_eq!(q.ste_output.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        // Rows 2 and 5 identical and nearest: the tie resolves to 2.
        let mut rows = vec![
            vec![9.0, 9.0],
            vec![-9.0, 9.0],
            vec![0.5, 0.5],
            vec![9.0, -9.0],
            vec![-9.0, -9.0],
            vec![0.5, 0.5],
        ];
        let flat: Vec<f64> = rows.drain(..).flatten().collect();
        let cb = Codebook::from_tensor(t(&flat, &[6, 2])).unwrap();
        let q = quantize(&t(&[0.5, 0.5], &[1, 2]), &cb).unwrap();
        assert_eq!(q.indices, vec![2]);
    }

    #[test]
    fn quantize_matches_brute_force_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 16;
        let dc = 4;
        let table: Vec<f64> = (0..k * dc).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let cb = Codebook::from_tensor(t(&table, &[k, dc])).unwrap();
        for _ in 0..100 {
            let z: Vec<f64> = (0..dc).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let got = quantize(&t(&z, &[1, dc]), &cb).unwrap().indices[0] as usize;
            // Exhaustive distance scan, independent of the implementation's
            // strict-less update rule.
            let mut dists: Vec<(usize, f64)> = (0..k)
                .map(|j| {
                    let d = (0..dc)
                        .map(|i| (z[i] - table[j * dc + i]).powi(2))
                        .sum::<f64>();
                    (j, d)
                })
                .collect();
            dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(got, dists[0].0);
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table: Vec<f64> = (0..8 * 3).map(|_| rng.random::<f64>()).collect();
        let cb = Codebook::from_tensor(t(&table, &[8, 3])).unwrap();
        let z: Vec<f64> = (0..5 * 3).map(|_| rng.random::<f64>()).collect();
        let q1 = quantize(&t(&z, &[5, 3]), &cb).unwrap();
        let q2 = quantize(&q1.z_q, &cb).unwrap();
        assert_eq!(q1.indices, q2.indices);
    }

    #[test]
    fn quantize_rejects_dim_mismatch() {
        let cb = Codebook::from_tensor(t(&[0.0; 8], &[4, 2])).unwrap();
        assert!(quantize(&t(&[0.0; 3], &[1, 3]), &cb).is_err());
    }

    #[test]
    fn ste_property_on_simple_and_composite_losses() {
        let z_e = t(&[0.2, -0.4, 0.7, 0.1], &[2, 2]).trainable();
        let cb = Codebook::from_tensor(t(&[0.0, 0.0, 1.0, 1.0], &[2, 2]).trainable()).unwrap();
        let q = quantize(&z_e, &cb).unwrap();
        let loss = q.ste_output.sum_all().unwrap();
        assert!(straight_through_grad_property(&loss, &z_e, &q.ste_output).unwrap());
        assert_eq!(z_e.grad().unwrap(), vec![1.0; 4]);

        // Composite loss: mse against a target.
        let z_e2 = t(&[0.3, 0.6, -0.2, 0.9], &[2, 2]).trainable();
        let q2 = quantize(&z_e2, &cb).unwrap();
        let target = t(&[1.0, 0.0, 0.5, 0.5], &[2, 2]);
        let loss2 = q2.ste_output.mse(&target).unwrap();
        assert!(straight_through_grad_property(&loss2, &z_e2, &q2.ste_output).unwrap());
    }

    #[test]
    fn ste_property_frozen_encoder_output() {
        let z_e = t(&[0.2, -0.4], &[1, 2]); // not trainable
        let cb = Codebook::from_tensor(t(&[0.0, 0.0, 1.0, 1.0], &[2, 2]).trainable()).unwrap();
        let q = quantize(&z_e, &cb).unwrap();
        let loss = q.ste_output.sum_all().unwrap();
        assert!(straight_through_grad_property(&loss, &z_e, &q.ste_output).unwrap());
        assert!(z_e.grad().is_none());
    }

    #[test]
    fn vqvae_loss_zero_at_fixed_point_and_delta_formula() {
        let x = t(&[0.5; 12], &[1, 2, 2, 3]);
        let v = t(&[0.1, 0.2, 0.3, 0.4], &[2, 2]);
        let zero = vqvae_loss(&x, &x, &v, &v, 0.25).unwrap();
        assert_eq!(zero.total.item(), 0.0);

        // z_e = v + delta, x_hat = x: total = (1+beta)*||delta||^2.
        let delta = [0.1, -0.2, 0.3, 0.05];
        let ze_data: Vec<f64> = v.to_vec().iter().zip(&delta).map(|(a, d)| a + d).collect();
        let z_e = t(&ze_data, &[2, 2]);
        let beta = 0.25;
        let l = vqvae_loss(&x, &x, &z_e, &v, beta).unwrap();
        let d2: f64 = delta.iter().map(|d| d * d).sum();
        assert!((l.total.item() - (1.0 + beta) * d2).abs() < 1e-12);
        assert!(vqvae_loss(&x, &x, &z_e, &v, -0.1).is_err());
    }

    #[test]
    fn loss_terms_partition_gradients() {
        // dict reaches only the codebook; commit reaches only the encoder
        // side.
        let z_e = t(&[0.3, 0.6, -0.2, 0.9], &[2, 2]).trainable();
        let v = t(&[0.0, 0.5, 0.0, 1.0], &[2, 2]).trainable();
        let x = t(&[0.5; 4], &[1, 1, 1, 4]);
        let l = vqvae_loss(&x, &x, &z_e, &v, 0.25).unwrap();

        l.dict.backward().unwrap();
        assert!(z_e.grad().is_none(), "dict must not touch the encoder");
        assert!(v.grad().is_some());

        z_e.zero_grad();
        v.zero_grad();
        l.commit.backward().unwrap();
        assert!(v.grad().is_none(), "commit must not touch the codebook");
        assert!(z_e.grad().is_some());
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(codebook_perplexity(&[10, 0, 0, 0]).unwrap(), 1.0);
        let uniform: Vec<u64> = vec![3; 64];
        assert!((codebook_perplexity(&uniform).unwrap() - 64.0).abs() < 1e-9);
        // {1/2, 1/4, 1/4} -> exp(1.5 ln 2) = 2^1.5
        let p = codebook_perplexity(&[2, 1, 1]).unwrap();
        assert!((p - 2.0_f64.powf(1.5)).abs() < 1e-12);
        assert!(codebook_perplexity(&[]).is_err());
        assert!(codebook_perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn desk_encoder_maps_32_to_4x4_and_decoder_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = VqVae::new(VqVaeConfig::desk(), &mut rng).unwrap();
        assert_eq!(model.config.downsample_factor(), 8);
        let x = Tensor::full(&[2, 32, 32, 3], 0.5);
        let z = model.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 32]);
        let back = model.decode(&z).unwrap();
        assert_eq!(back.shape(), &[2, 32, 32, 3]);
        assert!(back.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Deterministic given weights.
        let again = model.decode(&z).unwrap();
        assert_eq!(back.to_vec(), again.to_vec());
        // Indivisible input dims are rejected.
        assert!(model.encode(&Tensor::full(&[1, 20, 20, 3], 0.0)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = VqVaeConfig {
            codebook_size: 8,
            embed_dim: 4,
            resblocks_per_stage: vec![1, 1],
            base_channels: 4,
            in_channels: 3,
            beta: 0.25,
        };
        let model = VqVae::new(config, &mut rng).unwrap();
        let mut buf = Vec::new();
        model.write(&mut buf).unwrap();
        let loaded = VqVae::read(&mut CountingReader::new(buf.as_slice()), false).unwrap();
        let x = Tensor::full(&[1, 8, 8, 3], 0.3);
        let a = model.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(a.x_hat.to_vec(), b.x_hat.to_vec());
        assert_eq!(a.quant.indices, b.quant.indices);
        // Frozen load carries no trainable parameters outside the graph.
        assert!(loaded.params().iter().all(|(_, t)| !t.requires_grad()));
    }
}
