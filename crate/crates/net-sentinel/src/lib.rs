//! Self-supervised, interpretable anomaly detection for network traffic.
//!
//! The toolkit reads packet captures, learns the normal behavior of a network
//! with an encoder-decoder transformer over per-connection packet sequences,
//! aggregates the encoded packets into hierarchical graph features
//! (edge -> node -> global), and reports anomalies at all three levels so
//! that an operator can drill down from "the network looks wrong" to the
//! device and connection responsible.
//!
//! Module map:
//!
//! * [`packet`] — packet representation, feature schemas, numeric encoding
//! * [`pcap`] — classic PCAP reading/writing and frame dissection
//! * [`graph`] — rolling windows and per-window communication graphs
//! * [`autodiff`] — small reverse-mode tape used by the neural models
//! * [`transformer`] — encoder-decoder sequence model and training loop
//! * [`aggregate`] — edge/node/global feature aggregation
//! * [`detect`] — LOF / one-class SVM / autoencoder detectors + calibration
//! * [`eval`] — FPR/ADR metrics, k-fold splits, anomaly counts, 2-D projection
//! * [`synth`] — deterministic synthetic ICS traffic generator
//! * [`cache`] — on-disk tensor cache shared by the pipeline commands
//! * [`pipeline`] — preprocess / train / extract / fit / detect / report

pub mod aggregate;
pub mod autodiff;
pub mod cache;
pub mod checkpoint;
pub mod detect;
pub mod eval;
pub mod graph;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod synth;
pub mod transformer;
