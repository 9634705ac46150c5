//! Recall analysis of token streams and FLOP estimates.

pub mod flops;
pub mod recall;
pub mod stream;

pub use flops::{flops, Accounting, Arch, Dims};
pub use recall::{
    find_ar_hits, find_ar_hits_docs, gap_attribution, gap_attribution_reports, gap_histogram, slice_perplexity, Attribution,
    FreqTable, HitOpts, Slice, SliceReport,
};
pub use stream::TokenStream;
