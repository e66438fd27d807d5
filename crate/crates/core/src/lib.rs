//! Learned joint source-channel image transmission over simulated wireless
//! links, with a 256-QAM uncoded baseline for comparison.
//!
//! ```
//! use semlink::channel::{ChannelModel, ChannelSpec, Snr};
//! use semlink::dataset::ImageU8;
//! use semlink::qam::transmit_qam;
//!
//! let img = ImageU8::from_pixels(&[128u8; 3072], None).unwrap();
//! let spec = ChannelSpec::new(ChannelModel::Awgn, Snr::Noiseless, 7);
//! assert_eq!(transmit_qam(&img, &spec), img);
//! ```

pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod qam;
pub mod rng;
pub mod tiling;
pub mod training;

pub use channel::{ChannelModel, ChannelSpec, Snr};
pub use codec::{CodecConfig, CodecParams};
pub use dataset::{Dataset, ImageF, ImageU8};
pub use error::{Error, Result};
pub use harness::{EvalRecord, System};

/// Guide chapters, compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/qam.md")]
    mod qam {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/tiling.md")]
    mod tiling {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
