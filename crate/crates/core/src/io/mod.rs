//! Persistence: splat PLY files with feature sidecars, JSON scene configs,
//! PNG images and label maps, `.npy` tensors and named-tensor archives.

mod config;
mod image;
mod splat;
mod tensor;

#[cfg(test)]
mod tests;

pub use self::image::{
    normal_to_display, normalize_for_display, read_gray, read_image, read_label_ids, write_image, write_label_ids,
    write_label_map,
};
pub use config::{CameraConfig, FitSection, SceneConfig, UnprojectSection, ViewConfig};
pub use splat::{read_sidecar, read_splat, sidecar_path, write_sidecar, write_splat, Sidecar, SplatRead};
pub use tensor::{read_npy, write_npy, Tensor, TensorArchive};
