//! Video front-end: grayscale lip-crop clips to 40 ms-rate features.
//!
//! 3D conv stem (5x7x7, stride 1x2x2, temporal pad 2) with spatial max
//! pooling, a per-frame basic-block residual trunk with global average
//! pooling, and a linear projection. All spatial extents and widths are
//! config-driven so tests can run at toy sizes; the 88x88 / width-64 path is
//! the published default.

use crate::nn::{BnParams, LinearParams};
use crate::tensor::{Graph, NodeId, ParamSet, Real, Rng, Tensor};
use crate::{Error, Result};

pub const FRAME_RATE: usize = 25;
/// Max temporal mask per second of video: 0.4 s at 25 fps.
pub const MAX_MASK_FRAMES: usize = 10;

/// Grayscale frame stack at 25 fps, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct VideoClip {
    /// (T_v, H, W)
    pub frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::Param(format!(
                "clip must be (T, H, W), got {:?}",
                frames.shape
            )));
        }
        if frames.data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Input("clip values outside [-1, 1]".into()));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape[2]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            frames: Tensor::zeros(&self.frames.shape),
        }
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> Self {
        let (t, h, w) = (self.num_frames(), self.height(), self.width());
        let mut out = Tensor::zeros(&self.frames.shape);
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    out.data[(f * h + y) * w + x] = self.frames.data[(f * h + y) * w + (w - 1 - x)];
                }
            }
        }
        Self { frames: out }
    }
}

// ── Clip file format ───────────────────────────────────────────────────

const CLIP_MAGIC: &[u8; 4] = b"AVCL";

/// Header (magic, T_v, H, W as u32 LE) + uint8 frames row-major.
pub fn write_clip<W: std::io::Write>(w: &mut W, clip: &VideoClip) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    for dim in &clip.frames.shape {
        w.write_all(&(*dim as u32).to_le_bytes())?;
    }
    for &v in &clip.frames.data {
        let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        w.write_all(&[byte])?;
    }
    Ok(())
}

/// Loader rescales bytes via x / 127.5 - 1.
pub fn read_clip<R: std::io::Read>(mut r: R) -> Result<VideoClip> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Input("not a clip file (bad magic)".into()));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    let data = bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    VideoClip::new(Tensor::new(dims.to_vec(), data)?)
}

// ── Augmentation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Deterministic central crop (eval default).
    Central,
    /// Random crop + 50% horizontal flip + temporal masking (training).
    Random,
}

/// Training: one temporal mask per contiguous second (width ~ U[0, 10]
/// frames, zeroed), random crop, 50% horizontal flip. Eval: central crop
/// only. Flip averaging at test time is handled by the evaluator, which
/// scores the flipped clip separately.
pub fn video_augment(
    clip: &VideoClip,
    crop_size: usize,
    rng: &mut Rng,
    training: bool,
) -> Result<VideoClip> {
    let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
    if h < crop_size || w < crop_size {
        return Err(Error::Input(format!(
            "clip {h}x{w} smaller than crop {crop_size}"
        )));
    }
    let mut frames = clip.frames.clone();
    if training {
        // temporal masking, one mask per second
        let mut sec_start = 0;
        while sec_start < t {
            let sec_end = (sec_start + FRAME_RATE).min(t);
            let span = sec_end - sec_start;
            let width = rng.int_range(0, MAX_MASK_FRAMES.min(span));
            if width > 0 {
                let start = sec_start + rng.int_range(0, span - width);
                for f in start..start + width {
                    frames.data[f * h * w..(f + 1) * h * w].fill(0.0);
                }
            }
            sec_start = sec_end;
        }
    }
    let (dy, dx) = if training {
        (
            rng.int_range(0, h - crop_size),
            rng.int_range(0, w - crop_size),
        )
    } else {
        ((h - crop_size) / 2, (w - crop_size) / 2)
    };
    let flip = training && rng.coin();
    let mut out = Tensor::zeros(&[t, crop_size, crop_size]);
    for f in 0..t {
        for y in 0..crop_size {
            for x in 0..crop_size {
                let sx = if flip { crop_size - 1 - x } else { x };
                out.data[(f * crop_size + y) * crop_size + x] =
                    frames.data[(f * h + y + dy) * w + (sx + dx)];
            }
        }
    }
    VideoClip::new(out)
}

// ── Front-end ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoFrontendConfig {
    /// Spatial size fed into the stem (after cropping).
    pub crop_size: usize,
    pub stem_channels: usize,
    /// Residual trunk widths are base_width * {1, 2, 4, 8}.
    pub base_width: usize,
    pub out_dim: usize,
}

impl Default for VideoFrontendConfig {
    fn default() -> Self {
        Self {
            crop_size: 88,
            stem_channels: 64,
            base_width: 64,
            out_dim: 256,
        }
    }
}

impl VideoFrontendConfig {
    pub fn stage_widths(&self) -> [usize; 4] {
        [
            self.base_width,
            self.base_width * 2,
            self.base_width * 4,
            self.base_width * 8,
        ]
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: usize,
    bn1: BnParams,
    conv2: usize,
    bn2: BnParams,
    /// 1x1 strided projection when the shape changes
    shortcut: Option<(usize, BnParams)>,
    stride: usize,
}

impl BasicBlock {
    fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = params.weight(
            &format!("{name}.conv1.w"),
            &[out_ch, in_ch, 3, 3],
            in_ch * 9,
            rng,
        );
        let bn1 = BnParams::new(params, &format!("{name}.bn1"), out_ch);
        let conv2 = params.weight(
            &format!("{name}.conv2.w"),
            &[out_ch, out_ch, 3, 3],
            out_ch * 9,
            rng,
        );
        let bn2 = BnParams::new(params, &format!("{name}.bn2"), out_ch);
        let shortcut = if stride != 1 || in_ch != out_ch {
            let w = params.weight(
                &format!("{name}.down.w"),
                &[out_ch, in_ch, 1, 1],
                in_ch,
                rng,
            );
            let bn = BnParams::new(params, &format!("{name}.down.bn"), out_ch);
            Some((w, bn))
        } else {
            None
        };
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            stride,
        }
    }

    fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &mut ParamSet,
        x: NodeId,
    ) -> Result<NodeId> {
        let w1 = g.param_leaf(params, self.conv1);
        let s = (self.stride, self.stride);
        let y = g.conv2d(x, w1, None, s, (1, 1), 1)?;
        let y = self.bn1.forward(g, params, y, 1)?;
        let y = g.relu(y);
        let w2 = g.param_leaf(params, self.conv2);
        let y = g.conv2d(y, w2, None, (1, 1), (1, 1), 1)?;
        let y = self.bn2.forward(g, params, y, 1)?;
        let short = match &self.shortcut {
            Some((w, bn)) => {
                let wid = g.param_leaf(params, *w);
                let sc = g.conv2d(x, wid, None, s, (0, 0), 1)?;
                bn.forward(g, params, sc, 1)?
            }
            None => x,
        };
        let sum = g.add(y, short)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct VideoFrontend {
    pub cfg: VideoFrontendConfig,
    stem_w: usize,
    stem_bn: BnParams,
    blocks: Vec<BasicBlock>,
    proj: LinearParams,
}

impl VideoFrontend {
    pub fn new(cfg: VideoFrontendConfig, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let stem_w = params.weight(
            "video.stem.w",
            &[cfg.stem_channels, 1, 5, 7, 7],
            5 * 7 * 7,
            rng,
        );
        let stem_bn = BnParams::new(params, "video.stem.bn", cfg.stem_channels);
        let widths = cfg.stage_widths();
        let mut blocks = Vec::new();
        let mut in_ch = cfg.stem_channels;
        for (stage, &width) in widths.iter().enumerate() {
            for block in 0..2 {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    params,
                    &format!("video.res{}.{}", stage + 1, block),
                    in_ch,
                    width,
                    stride,
                    rng,
                ));
                in_ch = width;
            }
        }
        let proj = LinearParams::new(params, "video.proj", widths[3], cfg.out_dim, rng);
        Self {
            cfg,
            stem_w,
            stem_bn,
            blocks,
            proj,
        }
    }

    /// 3D stem: temporal extent preserved (pad 2), spatial conv stride 2 then
    /// 3x3/2 max pooling. (T, H, W) -> (T, stem_channels, H/4, W/4).
    pub fn stem<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &mut ParamSet,
        clip: &VideoClip,
    ) -> Result<NodeId> {
        if clip.num_frames() == 0 {
            return Err(Error::Input("empty clip".into()));
        }
        let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
        let x = g.constant(Tensor::<F> {
            shape: vec![1, 1, t, h, w],
            data: clip.frames.data.iter().map(|&v| F::from_f32(v)).collect(),
        });
        let sw = g.param_leaf(params, self.stem_w);
        let y = g.conv3d(x, sw, None, (1, 2, 2), (2, 3, 3))?;
        // (1, C, T, H', W') -> (T, C, H', W')
        let shape = g.shape(y).to_vec();
        let y = g.reshape(y, &shape[1..])?;
        let y = g.permute(y, &[1, 0, 2, 3])?;
        let y = self.stem_bn.forward(g, params, y, 1)?;
        let y = g.relu(y);
        g.max_pool2d(y, (3, 3), (2, 2), (1, 1))
    }

    /// Basic-block trunk applied per frame, then global average pooling:
    /// (T, C, h, w) -> (T, base_width * 8).
    pub fn trunk<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &mut ParamSet,
        mut x: NodeId,
    ) -> Result<NodeId> {
        for b in &self.blocks {
            x = b.forward(g, params, x)?;
        }
        g.mean_last2(x)
    }

    /// Full front-end: (T, H, W) clip -> (T, out_dim).
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &mut ParamSet,
        clip: &VideoClip,
    ) -> Result<NodeId> {
        let y = self.stem(g, params, clip)?;
        let y = self.trunk(g, params, y)?;
        self.proj.forward(g, params, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> VideoFrontendConfig {
        VideoFrontendConfig {
            crop_size: 16,
            stem_channels: 4,
            base_width: 4,
            out_dim: 8,
        }
    }

    fn random_clip(t: usize, hw: usize, seed: u64) -> VideoClip {
        let mut rng = Rng::new(seed);
        let data = (0..t * hw * hw).map(|_| rng.uniform(-1.0, 1.0)).collect();
        VideoClip::new(Tensor::new(vec![t, hw, hw], data).unwrap()).unwrap()
    }

    #[test]
    fn clip_rejects_out_of_range() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(VideoClip::new(t).is_err());
    }

    #[test]
    fn clip_file_roundtrip() {
        let clip = random_clip(3, 8, 5);
        let mut buf = Vec::new();
        write_clip(&mut buf, &clip).unwrap();
        let back = read_clip(&buf[..]).unwrap();
        assert_eq!(back.frames.shape, clip.frames.shape);
        for (a, b) in clip.frames.data.iter().zip(&back.frames.data) {
            assert!((a - b).abs() < 1.0 / 127.0);
        }
        assert!(read_clip(&b"BAD0rest"[..]).is_err());
    }

    #[test]
    fn augment_eval_is_central_crop() {
        let clip = random_clip(2, 96, 7);
        let out = video_augment(&clip, 88, &mut Rng::new(0), false).unwrap();
        assert_eq!(out.frames.shape, vec![2, 88, 88]);
        // offset (4, 4)
        let expect = clip.frames.data[(0 * 96 + 4) * 96 + 4];
        assert_eq!(out.frames.data[0], expect);
    }

    #[test]
    fn augment_deterministic_and_bounded_masks() {
        let clip = random_clip(50, 20, 9);
        let a = video_augment(&clip, 16, &mut Rng::new(3), true).unwrap();
        let b = video_augment(&clip, 16, &mut Rng::new(3), true).unwrap();
        assert_eq!(a.frames.data, b.frames.data);
        // each second zeroes at most MAX_MASK_FRAMES whole frames
        for sec in 0..2 {
            let masked = (sec * 25..(sec + 1) * 25)
                .filter(|&f| a.frames.data[f * 16 * 16..(f + 1) * 16 * 16].iter().all(|&v| v == 0.0))
                .count();
            assert!(masked <= MAX_MASK_FRAMES, "second {sec}: {masked}");
        }
        assert!(video_augment(&clip, 32, &mut Rng::new(0), true).is_err());
    }

    #[test]
    fn stem_preserves_time_and_zero_clip_maps_to_zero() {
        let cfg = toy_cfg();
        let mut params = ParamSet::new();
        let mut rng = Rng::new(11);
        let fe = VideoFrontend::new(cfg, &mut params, &mut rng);
        let clip = VideoClip::new(Tensor::zeros(&[3, 16, 16])).unwrap();
        let mut g = Graph::<f32>::eval();
        let y = fe.stem(&mut g, &mut params, &clip).unwrap();
        assert_eq!(g.shape(y)[0], 3);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_shape_trajectory_matches_published_sizes() {
        let cfg = VideoFrontendConfig::default();
        let mut params = ParamSet::new();
        let mut rng = Rng::new(1);
        let fe = VideoFrontend::new(cfg, &mut params, &mut rng);
        let clip = random_clip(2, 88, 3);
        let mut g = Graph::<f32>::inference();
        let mut x = fe.stem(&mut g, &mut params, &clip).unwrap();
        assert_eq!(g.shape(x), &[2, 64, 22, 22]);
        let expected = [
            (64usize, 22usize),
            (64, 22),
            (128, 11),
            (128, 11),
            (256, 6),
            (256, 6),
            (512, 3),
            (512, 3),
        ];
        for (i, b) in fe.blocks.iter().enumerate() {
            x = b.forward(&mut g, &mut params, x).unwrap();
            let s = g.shape(x);
            assert_eq!((s[1], s[2]), expected[i], "block {i}");
        }
        let pooled = g.mean_last2(x).unwrap();
        assert_eq!(g.shape(pooled), &[2, 512]);
        let out = fe.proj.forward(&mut g, &params, pooled).unwrap();
        assert_eq!(g.shape(out), &[2, 256]);
    }

    #[test]
    fn default_param_count_near_published() {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(1);
        VideoFrontend::new(VideoFrontendConfig::default(), &mut params, &mut rng);
        let n = params.num_elements(true) as f64;
        let published = 11.3e6;
        assert!(
            (n - published).abs() / published < 0.02,
            "front-end params {n} vs {published}"
        );
    }

    #[test]
    fn toy_forward_has_one_vector_per_frame() {
        let cfg = toy_cfg();
        let mut params = ParamSet::new();
        let mut rng = Rng::new(2);
        let fe = VideoFrontend::new(cfg, &mut params, &mut rng);
        let clip = random_clip(5, 16, 13);
        let mut g = Graph::<f32>::inference();
        let out = fe.forward(&mut g, &mut params, &clip).unwrap();
        assert_eq!(g.shape(out), &[5, 8]);
    }
}
