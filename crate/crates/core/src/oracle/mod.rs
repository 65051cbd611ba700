//! Synthetic ground truth: a word-to-AU+PS table and a face renderer driven
//! by AU+PS, plus the on-disk corpus built from them.

pub mod corpus;
pub mod render;
pub mod viseme;

pub use corpus::{generate_corpus, Corpus, Manifest, ManifestSample};
pub use render::{face_landmarks, render_face, RenderSpec};
pub use viseme::{sentence_to_aups, word_to_aups, VisemeTable};
