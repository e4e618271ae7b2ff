use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Base/novel partition of a label set.
///
/// Class indices are base classes first (in list order), then novel classes,
/// with background as the final extra index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub name: String,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
}

impl ClassSplit {
    pub fn new(
        name: impl Into<String>,
        base_classes: Vec<String>,
        novel_classes: Vec<String>,
    ) -> Result<Self, String> {
        let split = Self {
            name: name.into(),
            base_classes,
            novel_classes,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(format!("split {}: base and novel lists must be non-empty", self.name));
        }
        let all: Vec<&String> = self.base_classes.iter().chain(&self.novel_classes).collect();
        for (i, a) in all.iter().enumerate() {
            if all[..i].contains(a) {
                return Err(format!("split {}: class {a:?} listed twice", self.name));
            }
        }
        Ok(())
    }

    pub fn num_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel_classes.len()
    }

    /// Number of foreground classes.
    pub fn num_classes(&self) -> usize {
        self.num_base() + self.num_novel()
    }

    pub fn background(&self) -> usize {
        self.num_classes()
    }

    pub fn base_range(&self) -> Range<usize> {
        0..self.num_base()
    }

    pub fn novel_range(&self) -> Range<usize> {
        self.num_base()..self.num_classes()
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel_range().contains(&class_id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.base_classes
            .iter()
            .chain(&self.novel_classes)
            .position(|c| c == name)
    }

    /// Name of a foreground index, or `"background"` for the background index.
    pub fn class_name(&self, idx: usize) -> &str {
        if idx < self.num_base() {
            &self.base_classes[idx]
        } else if idx < self.num_classes() {
            &self.novel_classes[idx - self.num_base()]
        } else {
            "background"
        }
    }

    pub fn class_names(&self) -> Vec<&str> {
        (0..self.num_classes()).map(|i| self.class_name(i)).collect()
    }
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn carve(name: &str, all: &[&str], novel: &[&str]) -> ClassSplit {
    let base = all.iter().filter(|c| !novel.contains(c)).copied().collect::<Vec<_>>();
    ClassSplit {
        name: name.to_string(),
        base_classes: owned(&base),
        novel_classes: owned(novel),
    }
}

const IDD10: [&str; 10] = [
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "motorcycle",
    "bicycle",
    "autorickshaw",
    "animal",
    "traffic sign",
];

const VOC: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// The six registry entries: two IDD-10 splits, IDD-OS and three VOC splits.
pub fn builtin_splits() -> Vec<ClassSplit> {
    vec![
        carve("IDD-10-split1", &IDD10, &["bicycle", "bus", "truck"]),
        carve("IDD-10-split2", &IDD10, &["autorickshaw", "motorcycle", "truck"]),
        ClassSplit {
            name: "IDD-OS".into(),
            base_classes: owned(&IDD10),
            novel_classes: owned(&["street cart", "tractor", "water tanker", "excavator"]),
        },
        carve("VOC-split1", &VOC, &["bird", "bus", "cow", "motorbike", "sofa"]),
        carve("VOC-split2", &VOC, &["aeroplane", "bottle", "cow", "horse", "sofa"]),
        carve("VOC-split3", &VOC, &["boat", "cat", "motorbike", "sheep", "sofa"]),
    ]
}

/// Case-insensitive registry lookup.
pub fn builtin_split(name: &str) -> Option<ClassSplit> {
    builtin_splits()
        .into_iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
}
