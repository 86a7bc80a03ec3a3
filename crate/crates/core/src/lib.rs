pub mod body;
pub mod energy;
pub mod fixtures;
pub mod format;
pub mod mesh;
pub mod model;
pub mod resizer;
pub mod rig;
pub mod tensor;
pub mod trainer;
