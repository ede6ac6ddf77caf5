//! On-disk formats: weight containers, label masks, frames and run manifests.

mod frame;
mod manifest;
mod mask;
mod weights;

pub use frame::{decode_frame, read_frame, FrameNormalization};
pub use manifest::RunManifest;
pub use mask::{
    davis_palette, decode_mask, decode_mask_pgm, decode_mask_png, encode_mask_pgm, encode_mask_png, read_mask, write_mask,
};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, FORMAT_VERSION, MAGIC};
