pub mod assignment;
pub mod basis;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod optimizer;
pub mod pipeline;
pub mod primitive;
pub mod synth;

pub use error::{Error, Result};

/// `Vec3` as a plain `[x, y, z]` JSON array.
pub(crate) mod serde_vec3 {
    use crate::geometry::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}
