//! Synthetic training data: box-union objects and their rendered views.

pub mod dataset;
pub mod render;
pub mod shapes;

pub use dataset::{
    build_dataset, even_azimuths, Dataset, DatasetConfig, DatasetManifest, LoadedObject, Split,
};
pub use render::{render_view, RenderMode, RenderedView};
pub use shapes::{generate_shape, Archetype, ShapeSpec, VoxelBox};
