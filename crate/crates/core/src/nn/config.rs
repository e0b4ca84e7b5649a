//! Line-oriented network config parser.
//!
//! Sections `[net]`, `[convolutional]`, `[maxpool]`, `[connected]`,
//! `[softmax]` with `key=value` pairs and `#` comments. Key names follow
//! the Darknet convention: batch, learning_rate, max_iter, height, width,
//! channels under `[net]`; filters, size, stride, activation, output in
//! the layer sections. Unknown sections or keys are rejected with their
//! line number.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn syntax(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Leaky rectifier, negative slope 0.1.
    Leaky,
    Relu,
    Linear,
}

impl Activation {
    fn parse(line: usize, v: &str) -> Result<Activation, ConfigError> {
        match v {
            "leaky" => Ok(Activation::Leaky),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(syntax(line, format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Convolutional {
        filters: usize,
        size: usize,
        stride: usize,
        activation: Activation,
        batch_norm: bool,
    },
    Maxpool {
        size: usize,
        stride: usize,
    },
    Connected {
        outputs: usize,
        activation: Activation,
        batch_norm: bool,
    },
    Softmax,
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub batch: usize,
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            batch: 128,
            learning_rate: 0.1,
            max_iter: 500,
            input: (1, 28, 28),
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Net,
    Convolutional,
    Maxpool,
    Connected,
    Softmax,
}

pub fn parse_config(text: &str) -> Result<NetConfig, ConfigError> {
    let mut cfg = NetConfig::default();
    let mut section: Option<Section> = None;

    // Per-section scratch, flushed when the next section opens.
    let mut conv = (1usize, 3usize, 1usize, Activation::Leaky, true);
    let mut pool = (2usize, 2usize);
    let mut connected = (1usize, Activation::Leaky, true);

    let flush = |cfg: &mut NetConfig,
                 section: Option<Section>,
                 conv: &(usize, usize, usize, Activation, bool),
                 pool: &(usize, usize),
                 connected: &(usize, Activation, bool)| {
        match section {
            Some(Section::Convolutional) => cfg.layers.push(LayerSpec::Convolutional {
                filters: conv.0,
                size: conv.1,
                stride: conv.2,
                activation: conv.3,
                batch_norm: conv.4,
            }),
            Some(Section::Maxpool) => cfg.layers.push(LayerSpec::Maxpool {
                size: pool.0,
                stride: pool.1,
            }),
            Some(Section::Connected) => cfg.layers.push(LayerSpec::Connected {
                outputs: connected.0,
                activation: connected.1,
                batch_norm: connected.2,
            }),
            Some(Section::Softmax) => cfg.layers.push(LayerSpec::Softmax),
            Some(Section::Net) | None => {}
        }
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| syntax(line_no, "unterminated section header"))?;
            flush(&mut cfg, section, &conv, &pool, &connected);
            section = Some(match name {
                "net" => Section::Net,
                "convolutional" => Section::Convolutional,
                "maxpool" => Section::Maxpool,
                "connected" => Section::Connected,
                "softmax" => Section::Softmax,
                other => return Err(syntax(line_no, format!("unknown section '[{other}]'"))),
            });
            // Reset layer scratch to its defaults.
            conv = (1, 3, 1, Activation::Leaky, true);
            pool = (2, 2);
            connected = (1, Activation::Leaky, true);
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(line_no, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        let int = |v: &str| -> Result<usize, ConfigError> {
            v.parse::<usize>()
                .map_err(|_| syntax(line_no, format!("'{v}' is not a non-negative integer")))
        };
        match section {
            None => return Err(syntax(line_no, "key outside any section")),
            Some(Section::Net) => match key {
                "batch" => cfg.batch = int(value)?,
                "learning_rate" => {
                    cfg.learning_rate = value
                        .parse::<f64>()
                        .map_err(|_| syntax(line_no, format!("'{value}' is not a number")))?
                }
                "max_iter" => cfg.max_iter = int(value)?,
                "height" => cfg.input.1 = int(value)?,
                "width" => cfg.input.2 = int(value)?,
                "channels" => cfg.input.0 = int(value)?,
                other => return Err(syntax(line_no, format!("unknown [net] key '{other}'"))),
            },
            Some(Section::Convolutional) => match key {
                "filters" => conv.0 = int(value)?,
                "size" => conv.1 = int(value)?,
                "stride" => conv.2 = int(value)?,
                "activation" => conv.3 = Activation::parse(line_no, value)?,
                "batch_normalize" => conv.4 = parse_flag(line_no, value)?,
                other => {
                    return Err(syntax(
                        line_no,
                        format!("unknown [convolutional] key '{other}'"),
                    ))
                }
            },
            Some(Section::Maxpool) => match key {
                "size" => pool.0 = int(value)?,
                "stride" => pool.1 = int(value)?,
                other => return Err(syntax(line_no, format!("unknown [maxpool] key '{other}'"))),
            },
            Some(Section::Connected) => match key {
                "output" => connected.0 = int(value)?,
                "activation" => connected.1 = Activation::parse(line_no, value)?,
                "batch_normalize" => connected.2 = parse_flag(line_no, value)?,
                other => {
                    return Err(syntax(
                        line_no,
                        format!("unknown [connected] key '{other}'"),
                    ))
                }
            },
            Some(Section::Softmax) => {
                return Err(syntax(line_no, format!("unknown [softmax] key '{key}'")))
            }
        }
    }
    flush(&mut cfg, section, &conv, &pool, &connected);

    validate(&cfg)?;
    Ok(cfg)
}

fn parse_flag(line: usize, v: &str) -> Result<bool, ConfigError> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(syntax(line, format!("'{other}' is not 0 or 1"))),
    }
}

fn validate(cfg: &NetConfig) -> Result<(), ConfigError> {
    if cfg.batch == 0 {
        return Err(ConfigError::Invalid("batch must be >= 1".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(ConfigError::Invalid("learning_rate must be > 0".into()));
    }
    if cfg.input.0 == 0 || cfg.input.1 == 0 || cfg.input.2 == 0 {
        return Err(ConfigError::Invalid("input shape must be non-zero".into()));
    }
    let softmax_count = cfg
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Softmax))
        .count();
    if softmax_count != 1 || !matches!(cfg.layers.last(), Some(LayerSpec::Softmax)) {
        return Err(ConfigError::Invalid(
            "exactly one [softmax] section is required and it must be last".into(),
        ));
    }
    for l in &cfg.layers {
        match *l {
            LayerSpec::Convolutional {
                filters,
                size,
                stride,
                ..
            } => {
                if filters == 0 || size == 0 || stride == 0 {
                    return Err(ConfigError::Invalid(
                        "convolutional filters/size/stride must be >= 1".into(),
                    ));
                }
            }
            LayerSpec::Maxpool { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(ConfigError::Invalid(
                        "maxpool size/stride must be >= 1".into(),
                    ));
                }
            }
            LayerSpec::Connected { outputs, .. } => {
                if outputs == 0 {
                    return Err(ConfigError::Invalid("connected output must be >= 1".into()));
                }
            }
            LayerSpec::Softmax => {}
        }
    }
    Ok(())
}
