//! Forward passes for the sequence mixers: attention (full, windowed,
//! selective), BaseConv, Hyena, RWKV and RetNet.
//!
//! Every mixer maps an `N × d` input to an `N × d` output and carries no
//! position information of its own.

pub mod attention;
pub mod baseconv;
pub mod hyena;
pub mod implicit;
pub mod retnet;
pub mod rwkv;

pub use attention::{
    attention_forward, select, selective_attention, windowed_attention, AttentionOpts, AttentionParams, SelectorSpec,
    WindowMode,
};
pub use baseconv::{baseconv_forward, baseconv_forward_with, BaseConvParams, ConvMode};
pub use hyena::{hyena_forward, hyena_projections, HyenaParams};
pub use implicit::{implicit_filter, positional_embedding, ImplicitFilterParams};
pub use retnet::{retnet_forward, retnet_state_closed_form, retnet_states, RetNetParams};
pub use rwkv::{rwkv_decay_filter, rwkv_forward, RwkvParams};

use crate::error::Result;
use crate::numerics::SeqTensor;
use crate::Token;

/// Parameters of one mixer layer, tagged by variant.
#[derive(Debug, Clone, PartialEq)]
pub enum MixerParams {
    Attention(AttentionParams, AttentionOpts),
    BaseConv(BaseConvParams),
    Hyena(HyenaParams),
    Rwkv(RwkvParams),
    RetNet(RetNetParams),
    Windowed { params: AttentionParams, window: usize, mode: WindowMode },
    Selective { params: AttentionParams, selector: SelectorSpec },
}

impl MixerParams {
    pub fn name(&self) -> &'static str {
        match self {
            MixerParams::Attention(..) => "attention",
            MixerParams::BaseConv(_) => "baseconv",
            MixerParams::Hyena(_) => "hyena",
            MixerParams::Rwkv(_) => "rwkv",
            MixerParams::RetNet(_) => "retnet",
            MixerParams::Windowed { .. } => "windowed",
            MixerParams::Selective { .. } => "selective",
        }
    }

    /// Runs the layer. `tokens` is only read by the programmatic selector.
    pub fn forward(&self, u: &SeqTensor, tokens: &[Token]) -> Result<SeqTensor> {
        match self {
            MixerParams::Attention(p, o) => attention_forward(u, p, o),
            MixerParams::BaseConv(p) => baseconv_forward(u, p),
            MixerParams::Hyena(p) => hyena_forward(u, p),
            MixerParams::Rwkv(p) => rwkv_forward(u, p),
            MixerParams::RetNet(p) => retnet_forward(u, p),
            MixerParams::Windowed { params, window, mode } => windowed_attention(u, params, *window, *mode),
            MixerParams::Selective { params, selector } => Ok(selective_attention(u, tokens, params, selector)?.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn all_causal(n: usize, d: usize, seed: u64) -> Vec<MixerParams> {
        let mut rng = rng_from(seed);
        vec![
            MixerParams::Attention(AttentionParams::random(d, &mut rng), AttentionOpts::default()),
            MixerParams::BaseConv(BaseConvParams::random(n, d, &mut rng)),
            MixerParams::Hyena(HyenaParams::random(n, d, 2, &mut rng)),
            MixerParams::Rwkv(RwkvParams::random(d, &mut rng)),
            MixerParams::RetNet(RetNetParams::random(d, 0.8, &mut rng)),
            MixerParams::Windowed { params: AttentionParams::random(d, &mut rng), window: 3, mode: WindowMode::Sliding },
            MixerParams::Windowed { params: AttentionParams::random(d, &mut rng), window: 4, mode: WindowMode::Blocked },
        ]
    }

    #[test]
    fn shape_finiteness_and_causality() {
        let (n, d) = (20, 4);
        let mut rng = rng_from(99);
        let toks: Vec<Token> = (0..n as u32).collect();
        for m in all_causal(n, d, 7) {
            let u = SeqTensor::random_normal(n, d, 1.0, &mut rng);
            let y = m.forward(&u, &toks).unwrap();
            assert_eq!(y.shape(), (n, d), "{}", m.name());
            assert!(y.is_finite());
            for j in [3, 11, 19] {
                let mut bumped = u.clone();
                bumped.row_mut(j).iter_mut().for_each(|x| *x += 0.7);
                let y2 = m.forward(&bumped, &toks).unwrap();
                for i in 0..j {
                    assert_eq!(y.row(i), y2.row(i), "{} leaks row {j} into {i}", m.name());
                }
            }
        }
    }
}
