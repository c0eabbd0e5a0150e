//! Synthetic grounded scenes standing in for images: scene generation,
//! prototype features, the caption grammar, and automatic graph construction.

mod corpus;
mod detect;
mod lexicon;
mod scene;

pub use corpus::{full_asg, random_grounded_asg, sample_training_asg, Prototypes, Triplet, World};
pub use detect::{
    auto_generate_asg, jittered_proposals, relation_examples, soft_nms, spatial_feature, with_attribute_slots,
    Proposal, RelClassifier, RelExample, NMS_FLOOR, NMS_SIGMA, OBJECT_SCORE_MIN, RELATION_THRESHOLD,
};
pub use lexicon::{Vocab, WordKind, BOS, EOS, PAD, UNK};
pub use scene::{
    gen_scene, scene_seed, spatial_relation, BBox, Relation, Scene, SceneObject, WorldConfig, ABOVE, BELOW, LEFT_OF,
    RIGHT_OF, SPATIAL_RELATIONS,
};
