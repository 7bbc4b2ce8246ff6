//! Label abstraction layer: raw material names map onto a fixed set of 12
//! high-level classes, each with an albedo used by the flat-shaded target
//! renderer. Also home to the segmentation-map entropy used for camera
//! rejection.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// The 12-class abstraction. Order is fixed; ids are stable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum AbstractClass {
    Ignore = 0,
    Sky = 1,
    Tree = 2,
    Dirt = 3,
    Flower = 4,
    Grass = 5,
    Gravel = 6,
    Water = 7,
    Rock = 8,
    Stone = 9,
    Sand = 10,
    Snow = 11,
}

pub const NUM_CLASSES: usize = 12;

impl AbstractClass {
    pub const ALL: [AbstractClass; NUM_CLASSES] = [
        AbstractClass::Ignore,
        AbstractClass::Sky,
        AbstractClass::Tree,
        AbstractClass::Dirt,
        AbstractClass::Flower,
        AbstractClass::Grass,
        AbstractClass::Gravel,
        AbstractClass::Water,
        AbstractClass::Rock,
        AbstractClass::Stone,
        AbstractClass::Sand,
        AbstractClass::Snow,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AbstractClass::Ignore => "ignore",
            AbstractClass::Sky => "sky",
            AbstractClass::Tree => "tree",
            AbstractClass::Dirt => "dirt",
            AbstractClass::Flower => "flower",
            AbstractClass::Grass => "grass",
            AbstractClass::Gravel => "gravel",
            AbstractClass::Water => "water",
            AbstractClass::Rock => "rock",
            AbstractClass::Stone => "stone",
            AbstractClass::Sand => "sand",
            AbstractClass::Snow => "snow",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for AbstractClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw-name -> class table plus the per-class albedo palette used by the
/// flat-shaded target renderer.
#[derive(Debug, Clone)]
pub struct LabelScheme {
    table: HashMap<String, AbstractClass>,
    palette: [[f64; 3]; NUM_CLASSES],
}

impl Default for LabelScheme {
    fn default() -> Self {
        let mut table = HashMap::new();
        for (name, class) in DEFAULT_TABLE {
            table.insert((*name).to_string(), *class);
        }
        LabelScheme {
            table,
            palette: DEFAULT_PALETTE,
        }
    }
}

impl LabelScheme {
    /// Raw material name -> abstract class. Unknown names fall back to
    /// `Ignore` and emit a warning on stderr.
    pub fn translate(&self, raw_name: &str) -> AbstractClass {
        if let Some(class) = AbstractClass::from_name(raw_name) {
            return class;
        }
        match self.table.get(raw_name) {
            Some(&class) => class,
            None => {
                eprintln!("warning: unknown label '{raw_name}' mapped to ignore");
                AbstractClass::Ignore
            }
        }
    }

    /// True if the name resolves without the ignore fallback.
    pub fn knows(&self, raw_name: &str) -> bool {
        AbstractClass::from_name(raw_name).is_some() || self.table.contains_key(raw_name)
    }

    pub fn albedo(&self, class: AbstractClass) -> [f64; 3] {
        self.palette[class.id()]
    }

    /// Extend the raw-name table from a mapping file: lines `raw_name class_name`.
    pub fn load_mapping(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (raw, class_name) = match (it.next(), it.next()) {
                (Some(r), Some(c)) => (r, c),
                _ => {
                    return Err(Error::Config(format!(
                        "{}: line {}: expected 'raw_name class_name'",
                        path.display(),
                        lineno + 1
                    )))
                }
            };
            let class = AbstractClass::from_name(class_name).ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: unknown class '{}'",
                    path.display(),
                    lineno + 1,
                    class_name
                ))
            })?;
            self.table.insert(raw.to_string(), class);
        }
        Ok(())
    }

    /// Override palette entries from a file: lines `class_name r g b` (0-255).
    pub fn load_palette(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Config(format!(
                    "{}: line {}: expected 'class_name r g b'",
                    path.display(),
                    lineno + 1
                )));
            }
            let class = AbstractClass::from_name(parts[0]).ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: unknown class '{}'",
                    path.display(),
                    lineno + 1,
                    parts[0]
                ))
            })?;
            let mut rgb = [0.0; 3];
            for (i, p) in parts[1..].iter().enumerate() {
                let v: u8 = p.parse().map_err(|_| {
                    Error::Config(format!(
                        "{}: line {}: bad channel value '{}'",
                        path.display(),
                        lineno + 1,
                        p
                    ))
                })?;
                rgb[i] = v as f64 / 255.0;
            }
            self.palette[class.id()] = rgb;
        }
        Ok(())
    }

    /// 8-bit palette rows for paletted PNG output, in class-id order.
    pub fn palette_u8(&self) -> [[u8; 3]; NUM_CLASSES] {
        let mut out = [[0u8; 3]; NUM_CLASSES];
        for (row, rgb) in out.iter_mut().zip(self.palette.iter()) {
            for (o, v) in row.iter_mut().zip(rgb.iter()) {
                *o = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

/// Shannon entropy (nats) of the class histogram over non-ignore entries.
/// Sky counts as a class; an all-ignore (or empty) map has entropy 0.
pub fn label_entropy(seg: &[AbstractClass]) -> f64 {
    let mut counts = [0usize; NUM_CLASSES];
    let mut total = 0usize;
    for &class in seg {
        if class != AbstractClass::Ignore {
            counts[class.id()] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &n in &counts {
        if n > 0 {
            let p = n as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// Covers the fixture vocabulary; extend with [`LabelScheme::load_mapping`].
const DEFAULT_TABLE: &[(&str, AbstractClass)] = &[
    ("grass_block", AbstractClass::Grass),
    ("tall_grass", AbstractClass::Grass),
    ("fern", AbstractClass::Grass),
    ("dirt", AbstractClass::Dirt),
    ("coarse_dirt", AbstractClass::Dirt),
    ("podzol", AbstractClass::Dirt),
    ("mud", AbstractClass::Dirt),
    ("stone", AbstractClass::Stone),
    ("granite", AbstractClass::Stone),
    ("diorite", AbstractClass::Stone),
    ("andesite", AbstractClass::Stone),
    ("deepslate", AbstractClass::Stone),
    ("cobblestone", AbstractClass::Rock),
    ("mossy_cobblestone", AbstractClass::Rock),
    ("bedrock", AbstractClass::Rock),
    ("boulder", AbstractClass::Rock),
    ("sand", AbstractClass::Sand),
    ("red_sand", AbstractClass::Sand),
    ("sandstone", AbstractClass::Sand),
    ("gravel", AbstractClass::Gravel),
    ("clay", AbstractClass::Gravel),
    ("water", AbstractClass::Water),
    ("ice", AbstractClass::Water),
    ("snow", AbstractClass::Snow),
    ("snow_block", AbstractClass::Snow),
    ("powder_snow", AbstractClass::Snow),
    ("oak_log", AbstractClass::Tree),
    ("oak_leaves", AbstractClass::Tree),
    ("birch_log", AbstractClass::Tree),
    ("birch_leaves", AbstractClass::Tree),
    ("spruce_log", AbstractClass::Tree),
    ("spruce_leaves", AbstractClass::Tree),
    ("poppy", AbstractClass::Flower),
    ("dandelion", AbstractClass::Flower),
    ("cornflower", AbstractClass::Flower),
    ("air", AbstractClass::Ignore),
    ("barrier", AbstractClass::Ignore),
];

const DEFAULT_PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.00, 0.00, 0.00], // ignore
    [0.53, 0.71, 0.92], // sky
    [0.13, 0.35, 0.13], // tree
    [0.42, 0.28, 0.16], // dirt
    [0.85, 0.30, 0.35], // flower
    [0.30, 0.55, 0.20], // grass
    [0.52, 0.50, 0.48], // gravel
    [0.15, 0.32, 0.60], // water
    [0.45, 0.44, 0.42], // rock
    [0.58, 0.58, 0.58], // stone
    [0.82, 0.76, 0.55], // sand
    [0.94, 0.95, 0.97], // snow
];
