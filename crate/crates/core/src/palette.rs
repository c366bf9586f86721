//! The 28-class body-part taxonomy and its display colors.

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 28;
pub const BACKGROUND: u32 = 0;

const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Background",
    "Apparel",
    "Face_Neck",
    "Hair",
    "Left_Foot",
    "Left_Hand",
    "Left_Lower_Arm",
    "Left_Lower_Leg",
    "Left_Shoe",
    "Left_Sock",
    "Left_Upper_Arm",
    "Left_Upper_Leg",
    "Lower_Clothing",
    "Right_Foot",
    "Right_Hand",
    "Right_Lower_Arm",
    "Right_Lower_Leg",
    "Right_Shoe",
    "Right_Sock",
    "Right_Upper_Arm",
    "Right_Upper_Leg",
    "Torso",
    "Upper_Clothing",
    "Lower_Lip",
    "Upper_Lip",
    "Lower_Teeth",
    "Upper_Teeth",
    "Tongue",
];

const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [255, 128, 0],
    [255, 204, 153],
    [102, 51, 0],
    [0, 102, 204],
    [255, 255, 0],
    [0, 204, 102],
    [51, 153, 255],
    [0, 0, 153],
    [153, 204, 255],
    [0, 153, 0],
    [0, 76, 153],
    [128, 0, 128],
    [204, 0, 102],
    [255, 255, 102],
    [102, 255, 178],
    [255, 102, 178],
    [102, 0, 51],
    [255, 178, 220],
    [76, 153, 0],
    [153, 0, 76],
    [255, 0, 0],
    [204, 102, 255],
    [178, 34, 34],
    [255, 99, 71],
    [224, 224, 224],
    [192, 192, 192],
    [255, 20, 147],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: u32,
    pub name: &'static str,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    entries: Vec<ClassEntry>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        Self::body_parts()
    }
}

impl ClassPalette {
    pub fn body_parts() -> Self {
        let entries = (0..NUM_CLASSES)
            .map(|i| ClassEntry {
                id: i as u32,
                name: CLASS_NAMES[i],
                color: CLASS_COLORS[i],
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn color(&self, id: u32) -> Result<[u8; 3]> {
        self.entries
            .get(id as usize)
            .map(|e| e.color)
            .ok_or_else(|| Error::Invalid(format!("class id {id} outside the palette")))
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }
}
