use crate::error::{Error, Result};

/// Per-voxel class ids of one `(d, h, w)` volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    extents: [usize; 3],
    data: Vec<u8>,
}

impl Labels {
    pub fn new(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if extents.contains(&0) || extents.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "label extents {extents:?} do not hold {} values",
                data.len()
            )));
        }
        Ok(Labels { extents, data })
    }

    pub fn filled(extents: [usize; 3], class: u8) -> Self {
        Labels {
            extents,
            data: vec![class; extents.iter().product()],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        let [_, h, w] = self.extents;
        self.data[(z * h + y) * w + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// Nearest-neighbour downsampling that picks the centre voxel of each
    /// block, rounding toward the lower index when the block is even.
    pub fn rescale(&self, target: [usize; 3]) -> Result<Labels> {
        let mut factor = [0; 3];
        for a in 0..3 {
            if target[a] == 0 || self.extents[a] % target[a] != 0 {
                return Err(Error::shape(format!(
                    "cannot rescale labels {:?} to {target:?}",
                    self.extents
                )));
            }
            factor[a] = self.extents[a] / target[a];
        }
        let offset = factor.map(|f| (f - 1) / 2);
        let mut data = Vec::with_capacity(target.iter().product());
        for z in 0..target[0] {
            for y in 0..target[1] {
                for x in 0..target[2] {
                    data.push(self.get(
                        z * factor[0] + offset[0],
                        y * factor[1] + offset[1],
                        x * factor[2] + offset[2],
                    ));
                }
            }
        }
        Labels::new(target, data)
    }
}
