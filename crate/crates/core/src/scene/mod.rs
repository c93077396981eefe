//! Driving clip domain model: camera geometry, boxes and masks, tracklets,
//! stuff regions and label layers.

mod geometry;
mod labels;
mod mask;
mod objects;

pub use geometry::{distance, unproject, CameraIntrinsics, Point3};
pub use labels::{derive_clip_labels, Intention, LabelLayers, Response, Stimulus};
pub use mask::{iou, mask_generate, BinaryMask, BoundingBox};
pub use objects::{
    Clip, Content, DepthLayer, DepthMap, GroundPlane, StuffCategory, StuffRegion, ThingCategory, Tracklet,
    MAX_THINGS_PER_FRAME,
};
