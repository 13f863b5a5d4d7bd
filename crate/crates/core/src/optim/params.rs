use crate::geometry::{orthonormalize, so3_exp, Pose6D};
use nalgebra::{Matrix3, Vector3};

/// Handle to one block inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockId(usize);

/// Rotation-plus-translation block pair, the usual pose parameterization.
#[derive(Clone, Copy, Debug)]
pub struct PoseBlock {
    pub rotation: BlockId,
    pub translation: BlockId,
}

#[derive(Clone, Debug)]
enum BlockKind {
    Euclidean,
    /// Decodes as `base * exp(hat(delta))` where `delta` is the stored
    /// 3-vector; `base` is re-anchored whenever the increment grows large.
    Rotation { base: Matrix3<f64> },
}

#[derive(Clone, Debug)]
struct Block {
    offset: usize,
    len: usize,
    kind: BlockKind,
}

/// Flat parameter vector with SE(3)-aware blocks.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector {
            values: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn set_value(&mut self, index: usize, value: f64) {
        self.values[index] = value;
    }

    pub fn push_scalar(&mut self, value: f64) -> BlockId {
        self.push_scalars(&[value])
    }

    pub fn push_scalars(&mut self, values: &[f64]) -> BlockId {
        let id = BlockId(self.blocks.len());
        self.blocks.push(Block {
            offset: self.values.len(),
            len: values.len(),
            kind: BlockKind::Euclidean,
        });
        self.values.extend_from_slice(values);
        id
    }

    /// Rotation block initialized at `base` with a zero local increment.
    pub fn push_rotation(&mut self, base: Matrix3<f64>) -> BlockId {
        let id = BlockId(self.blocks.len());
        self.blocks.push(Block {
            offset: self.values.len(),
            len: 3,
            kind: BlockKind::Rotation { base },
        });
        self.values.extend_from_slice(&[0.0, 0.0, 0.0]);
        id
    }

    pub fn push_pose(&mut self, pose: &Pose6D) -> PoseBlock {
        let rotation = self.push_rotation(*pose.rotation());
        let translation = self.push_scalars(pose.translation().as_slice());
        PoseBlock {
            rotation,
            translation,
        }
    }

    pub fn scalars(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id.0];
        debug_assert!(matches!(b.kind, BlockKind::Euclidean));
        &self.values[b.offset..b.offset + b.len]
    }

    pub fn scalar(&self, id: BlockId) -> f64 {
        let s = self.scalars(id);
        debug_assert_eq!(s.len(), 1);
        s[0]
    }

    pub fn vector3(&self, id: BlockId) -> Vector3<f64> {
        let s = self.scalars(id);
        Vector3::new(s[0], s[1], s[2])
    }

    /// Decodes a rotation block: `base * exp(hat(delta))`.
    pub fn rotation(&self, id: BlockId) -> Matrix3<f64> {
        let b = &self.blocks[id.0];
        match &b.kind {
            BlockKind::Rotation { base } => {
                let d = &self.values[b.offset..b.offset + 3];
                base * so3_exp(&Vector3::new(d[0], d[1], d[2]))
            }
            BlockKind::Euclidean => panic!("block {:?} is not a rotation", id),
        }
    }

    pub fn pose(&self, block: &PoseBlock) -> Pose6D {
        Pose6D::from_parts_unchecked(self.rotation(block.rotation), self.vector3(block.translation))
    }

    /// Raw coordinate span of a block, used for hashing into memo keys.
    pub fn block_values(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.values[b.offset..b.offset + b.len]
    }

    /// Folds large local increments back into the base rotations so the
    /// increment stays well inside the injectivity radius of exp. Decoded
    /// rotations are unchanged.
    pub fn rebase_rotations(&mut self) {
        for b in &mut self.blocks {
            if let BlockKind::Rotation { base } = &mut b.kind {
                let d = Vector3::new(
                    self.values[b.offset],
                    self.values[b.offset + 1],
                    self.values[b.offset + 2],
                );
                if d.norm() > 0.5 {
                    *base = orthonormalize(&(*base * so3_exp(&d)));
                    self.values[b.offset] = 0.0;
                    self.values[b.offset + 1] = 0.0;
                    self.values[b.offset + 2] = 0.0;
                }
            }
        }
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_log;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_block_decodes_through_exp_map() {
        let base = so3_exp(&Vector3::new(0.1, 0.2, 0.3));
        let mut p = ParamVector::new();
        let rid = p.push_rotation(base);
        assert_relative_eq!(p.rotation(rid), base, epsilon = 1e-15);
        p.set_value(0, 0.05);
        let r = p.rotation(rid);
        assert_relative_eq!(r, base * so3_exp(&Vector3::new(0.05, 0.0, 0.0)), epsilon = 1e-15);
        // Still orthonormal.
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rebase_preserves_decoded_rotation() {
        let base = so3_exp(&Vector3::new(-0.4, 0.8, 0.1));
        let mut p = ParamVector::new();
        let rid = p.push_rotation(base);
        p.set_value(0, 0.6);
        p.set_value(1, -0.3);
        let before = p.rotation(rid);
        p.rebase_rotations();
        assert_eq!(p.block_values(rid), &[0.0, 0.0, 0.0]);
        let after = p.rotation(rid);
        assert!(so3_log(&(before.transpose() * after)).norm() < 1e-12);
    }

    #[test]
    fn mixed_blocks_keep_offsets_straight() {
        let mut p = ParamVector::new();
        let a = p.push_scalars(&[1.0, 2.0]);
        let r = p.push_rotation(Matrix3::identity());
        let b = p.push_scalar(7.0);
        assert_eq!(p.len(), 6);
        assert_eq!(p.scalars(a), &[1.0, 2.0]);
        assert_eq!(p.scalar(b), 7.0);
        assert_relative_eq!(p.rotation(r), Matrix3::identity(), epsilon = 1e-15);
    }
}
