use super::{Binder, Param, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// 1-D convolution over `[channels × time]` inputs.
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
            return Err(Error::Config(format!("{name}: conv sizes must be positive")));
        }
        let bound = 1.0 / ((in_channels * kernel_size) as f32).sqrt();
        params.insert(
            format!("{name}.weight"),
            Param::uniform(&[out_channels, in_channels, kernel_size], bound, rng),
        );
        params.insert(format!("{name}.bias"), Param::filled(&[out_channels], 0.0));
        Ok(Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        })
    }

    /// `floor((len + 2·padding − kernel) / stride) + 1`, or `None` when the
    /// input is shorter than the kernel.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        conv_output_len(len, self.kernel_size, self.stride, self.padding)
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let (c, len) = x.dims2()?;
        if c != self.in_channels {
            return Err(Error::dim(format!("{} expects {} channels, got {c}", self.name, self.in_channels)));
        }
        if self.output_len(len).is_none() {
            return Err(Error::InputTooShort {
                required: self.kernel_size.saturating_sub(2 * self.padding),
                actual: len,
            });
        }
        let w = b.get(&format!("{}.weight", self.name))?;
        let bias = b.get(&format!("{}.bias", self.name))?;
        b.tape().conv1d(x, &w, &bias, self.stride, self.padding)
    }
}

pub(crate) fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
pub struct GroupNormLayer {
    pub name: String,
    pub num_groups: usize,
    pub channels: usize,
    pub epsilon: f32,
}

impl GroupNormLayer {
    pub fn new(params: &mut ParamSet, name: &str, num_groups: usize, channels: usize) -> Result<Self> {
        if num_groups == 0 || channels % num_groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {channels} channels are not divisible into {num_groups} groups"
            )));
        }
        params.insert(format!("{name}.gamma"), Param::filled(&[channels], 1.0));
        params.insert(format!("{name}.beta"), Param::filled(&[channels], 0.0));
        Ok(Self {
            name: name.to_string(),
            num_groups,
            channels,
            epsilon: GROUP_NORM_EPS,
        })
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let (c, _) = x.dims2()?;
        if c != self.channels {
            return Err(Error::dim(format!("{} expects {} channels, got {c}", self.name, self.channels)));
        }
        let gamma = b.get(&format!("{}.gamma", self.name))?;
        let beta = b.get(&format!("{}.beta", self.name))?;
        b.tape().group_norm(x, &gamma, &beta, self.num_groups, self.epsilon)
    }
}
