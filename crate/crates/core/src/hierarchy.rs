//! Two-level classification: a service model on reduced-size matrices picks
//! the service, then that service's application model (if one is
//! registered) names the application from the full-size matrix. The service
//! decides the DSCP codepoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::cnn::{CnnError, CnnModel};
use crate::encoder::{downsample, encode_full, ByteMatrix, EncoderConfig};
use crate::pcap::RawPacket;

/// Two services with their applications, matching the ISCX chat/video subset.
pub const DEFAULT_CATALOG: &str = include_str!("../catalogs/chat_video.catalog");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("line {line}: application `{name}` is already assigned")]
    DuplicateApplication { line: usize, name: String },
    #[error("line {line}: service `{name}` is declared twice")]
    DuplicateService { line: usize, name: String },
    #[error("line {line}: application `{app}` refers to undeclared service `{service}`")]
    UnknownServiceReference {
        line: usize,
        app: String,
        service: String,
    },
    #[error("line {line}: dscp `{value}` is not a distinct codepoint in 0..=63")]
    BadDscp { line: usize, value: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("cannot read catalog {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error("service model classes {model:?} differ from catalog services {catalog:?}")]
    ServiceClasses {
        model: Vec<String>,
        catalog: Vec<String>,
    },
    #[error("application model for `{service}` has class `{app}` outside that service")]
    ForeignApplication { service: String, app: String },
    #[error("application model registered for unknown service `{0}`")]
    UnknownService(String),
    #[error("{stage} model expects {expected}x{expected} input, encoder produces {actual}x{actual}")]
    InputSide {
        stage: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Model(#[from] CnnError),
}

/// Service classes, their DSCP codepoints, and which applications they cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub services: Vec<String>,
    /// Applications in declaration order, with their service.
    pub applications: Vec<(String, String)>,
    pub dscp: BTreeMap<String, u8>,
}

impl Catalog {
    /// Parses `service <name> dscp <0-63>` and `app <application> <service>`
    /// lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut cat = Catalog {
            services: Vec::new(),
            applications: Vec::new(),
            dscp: BTreeMap::new(),
        };
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            match words.as_slice() {
                ["service", name, "dscp", value] => {
                    if cat.services.iter().any(|s| s == name) {
                        return Err(CatalogError::DuplicateService {
                            line,
                            name: name.to_string(),
                        });
                    }
                    let code = value
                        .parse::<u8>()
                        .ok()
                        .filter(|&c| c <= 63 && !cat.dscp.values().any(|&d| d == c))
                        .ok_or_else(|| CatalogError::BadDscp {
                            line,
                            value: value.to_string(),
                        })?;
                    cat.services.push(name.to_string());
                    cat.dscp.insert(name.to_string(), code);
                }
                ["app", app, service] => {
                    if cat.applications.iter().any(|(a, _)| a == app) {
                        return Err(CatalogError::DuplicateApplication {
                            line,
                            name: app.to_string(),
                        });
                    }
                    if !cat.services.iter().any(|s| s == service) {
                        return Err(CatalogError::UnknownServiceReference {
                            line,
                            app: app.to_string(),
                            service: service.to_string(),
                        });
                    }
                    cat.applications.push((app.to_string(), service.to_string()));
                }
                _ => {
                    return Err(CatalogError::Syntax {
                        line,
                        message: format!("unrecognized entry `{content}`"),
                    })
                }
            }
        }
        Ok(cat)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CatalogError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn service_of(&self, app: &str) -> Option<&str> {
        self.applications
            .iter()
            .find(|(a, _)| a == app)
            .map(|(_, s)| s.as_str())
    }

    pub fn applications_of<'a>(&'a self, service: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.applications
            .iter()
            .filter(move |(_, s)| s == service)
            .map(|(a, _)| a.as_str())
    }

    pub fn dscp_of(&self, service: &str) -> Option<u8> {
        self.dscp.get(service).copied()
    }
}

/// Load a catalog from disk.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
    Catalog::load(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub name: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimings {
    pub encode_ns: u64,
    pub service_ns: u64,
    pub application_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketVerdict {
    pub service: Decision,
    pub application: Option<Decision>,
    pub dscp: u8,
    pub timings: StageTimings,
}

impl PacketVerdict {
    /// Equality ignoring timings.
    pub fn same_decision(&self, other: &PacketVerdict) -> bool {
        self.service == other.service && self.application == other.application && self.dscp == other.dscp
    }
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u128::from(u64::MAX)) as u64
}

/// Immutable once built; every `classify_*` method may be called concurrently.
#[derive(Debug, Clone)]
pub struct HierarchicalClassifier {
    catalog: Catalog,
    service_model: CnnModel,
    app_models: BTreeMap<String, CnnModel>,
    encoder: EncoderConfig,
}

impl HierarchicalClassifier {
    pub fn new(
        catalog: Catalog,
        service_model: CnnModel,
        app_models: BTreeMap<String, CnnModel>,
        encoder: EncoderConfig,
    ) -> Result<Self, HierarchyError> {
        service_model.validate()?;
        if service_model.class_names != catalog.services {
            return Err(HierarchyError::ServiceClasses {
                model: service_model.class_names.clone(),
                catalog: catalog.services.clone(),
            });
        }
        if service_model.input_side != encoder.reduced_side {
            return Err(HierarchyError::InputSide {
                stage: "service",
                expected: service_model.input_side,
                actual: encoder.reduced_side,
            });
        }
        for (service, model) in &app_models {
            model.validate()?;
            if !catalog.services.contains(service) {
                return Err(HierarchyError::UnknownService(service.clone()));
            }
            if let Some(app) = model
                .class_names
                .iter()
                .find(|a| catalog.service_of(a) != Some(service.as_str()))
            {
                return Err(HierarchyError::ForeignApplication {
                    service: service.clone(),
                    app: app.clone(),
                });
            }
            if model.input_side != encoder.full_side {
                return Err(HierarchyError::InputSide {
                    stage: "application",
                    expected: model.input_side,
                    actual: encoder.full_side,
                });
            }
        }
        Ok(HierarchicalClassifier {
            catalog,
            service_model,
            app_models,
            encoder,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn service_model(&self) -> &CnnModel {
        &self.service_model
    }

    pub fn app_model(&self, service: &str) -> Option<&CnnModel> {
        self.app_models.get(service)
    }

    fn service_decision(&self, reduced: &ByteMatrix) -> Result<Decision, CnnError> {
        let (idx, probability) = self.service_model.predict(reduced)?;
        Ok(Decision {
            name: self.service_model.class_names[idx].clone(),
            probability,
        })
    }

    pub fn classify_service(&self, packet: &RawPacket) -> Result<Decision, CnnError> {
        let full = encode_full(packet, &self.encoder);
        self.service_decision(&self.reduce(&full))
    }

    fn reduce(&self, full: &ByteMatrix) -> ByteMatrix {
        downsample(full, self.encoder.reduced_side).expect("checked at construction")
    }

    /// Classifies an already encoded full-size matrix.
    pub fn classify_matrix(&self, full: &ByteMatrix) -> Result<PacketVerdict, CnnError> {
        let t0 = Instant::now();
        let reduced = self.reduce(full);
        let t1 = Instant::now();
        let service = self.service_decision(&reduced)?;
        let t2 = Instant::now();
        let application = match self.app_models.get(&service.name) {
            Some(model) => {
                let (idx, probability) = model.predict(full)?;
                Some(Decision {
                    name: model.class_names[idx].clone(),
                    probability,
                })
            }
            None => None,
        };
        let t3 = Instant::now();
        let dscp = self
            .catalog
            .dscp_of(&service.name)
            .expect("service model classes equal catalog services");
        Ok(PacketVerdict {
            service,
            application,
            dscp,
            timings: StageTimings {
                encode_ns: nanos(t1 - t0),
                service_ns: nanos(t2 - t1),
                application_ns: nanos(t3 - t2),
            },
        })
    }

    pub fn classify_full(&self, packet: &RawPacket) -> Result<PacketVerdict, CnnError> {
        let t0 = Instant::now();
        let full = encode_full(packet, &self.encoder);
        let encode = Instant::now() - t0;
        let mut verdict = self.classify_matrix(&full)?;
        verdict.timings.encode_ns += nanos(encode);
        Ok(verdict)
    }

    /// Classifies in parallel; verdicts come back in input order.
    pub fn classify_batch(&self, packets: &[RawPacket]) -> BatchVerdicts {
        let started = Instant::now();
        let verdicts = packets.par_iter().map(|p| self.classify_full(p)).collect();
        BatchVerdicts {
            verdicts,
            elapsed: started.elapsed(),
        }
    }
}

#[derive(Debug)]
pub struct BatchVerdicts {
    pub verdicts: Vec<Result<PacketVerdict, CnnError>>,
    pub elapsed: Duration,
}

impl BatchVerdicts {
    pub fn errors(&self) -> impl Iterator<Item = (usize, &CnnError)> {
        self.verdicts
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().err().map(|e| (i, e)))
    }
}
