//! Front-end pipeline toolkit for compact vision-language model inference:
//! image preprocessing, prompt tokenization, visual token reduction,
//! host-side transfer staging, a mock backend, bounding-box codecs, and a
//! latency benchmark harness.

pub mod backend;
pub mod bench;
pub mod boxcodec;
pub mod corpus;
pub mod imgproc;
pub mod profile;
pub mod recipe;
pub mod tensor_io;
pub mod tokenizer;
pub mod tokenred;
pub mod transfer;
