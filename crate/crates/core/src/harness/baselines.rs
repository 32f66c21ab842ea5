//! Published comparison numbers. The layer-selection method is not
//! reimplemented; its results only appear here.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodNumbers {
    pub label: String,
    /// Selection runtime, seconds.
    pub runtime_s: f64,
    pub training_time_s: f64,
    pub evaluation_time_ms: f64,
    pub accuracy: f64,
    pub trainable_params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedBlock {
    pub block: usize,
    pub bi: f64,
    pub train_ba: f64,
    pub test_ba: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConstants {
    pub dataset: String,
    pub layer_select: MethodNumbers,
    pub block_select: MethodNumbers,
    #[serde(default)]
    pub blocks: Vec<PublishedBlock>,
}

pub const PUBLISHED_KEYS: [&str; 3] = ["food101", "cifar100", "mangoleafbd"];

fn method(label: &str, runtime_s: f64, training_time_s: f64, evaluation_time_ms: f64, accuracy: f64, trainable_params: u64) -> MethodNumbers {
    MethodNumbers {
        label: label.into(),
        runtime_s,
        training_time_s,
        evaluation_time_ms,
        accuracy,
        trainable_params,
    }
}

fn blocks(rows: [(f64, f64, f64); 7]) -> Vec<PublishedBlock> {
    rows.iter()
        .enumerate()
        .map(|(i, &(bi, train_ba, test_ba))| PublishedBlock {
            block: i + 1,
            bi,
            train_ba,
            test_ba,
        })
        .collect()
}

/// Built-in published numbers by dataset key.
pub fn published(key: &str) -> Option<BaselineConstants> {
    let ls = "published LayerSelect";
    let bs = "published BlockSelect";
    let c = match key {
        "food101" => BaselineConstants {
            dataset: "Food-101".into(),
            layer_select: method(ls, 3.0 * 3600.0, 31.0 * 60.0, 42.0, 0.77, 579_813),
            block_select: method(bs, 43.0 * 60.0, 21.0 * 60.0, 32.0, 0.79, 3_113_413),
            blocks: blocks([
                (1.420, 0.84, 0.72),
                (1.484, 0.83, 0.72),
                (1.073, 0.83, 0.72),
                (1.072, 0.82, 0.72),
                (1.011, 0.84, 0.72),
                (0.959, 0.84, 0.72),
                (1.132, 0.82, 0.72),
            ]),
        },
        "cifar100" => BaselineConstants {
            dataset: "CIFAR-100".into(),
            layer_select: method(ls, 94.0 * 60.0, 28.0 * 60.0, 31.0, 0.81, 256_500),
            block_select: method(bs, 39.0 * 60.0, 19.0 * 60.0, 31.0, 0.82, 830_758),
            blocks: blocks([
                (1.952, 0.88, 0.72),
                (1.471, 0.89, 0.72),
                (1.152, 0.89, 0.72),
                (0.964, 0.90, 0.71),
                (1.021, 0.89, 0.72),
                (1.000, 0.90, 0.71),
                (0.965, 0.89, 0.72),
            ]),
        },
        "mangoleafbd" => BaselineConstants {
            dataset: "MangoLeafBD".into(),
            layer_select: method(ls, 12.0 * 60.0 + 19.0, 19.0 * 60.0, 58.0, 1.0, 361_896),
            block_select: method(bs, 2.0 * 60.0 + 42.0, 18.0 * 60.0, 99.0, 0.997, 424_784),
            blocks: blocks([
                (1.491, 1.0, 0.993),
                (1.459, 1.0, 0.995),
                (1.259, 1.0, 0.995),
                (1.078, 1.0, 0.995),
                (0.029, 1.0, 0.995),
                (0.815, 1.0, 0.995),
                (0.022, 1.0, 0.995),
            ]),
        },
        _ => return None,
    };
    Some(c)
}
