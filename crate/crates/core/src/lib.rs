//! Turns a frozen recurrent (or feedforward-plus-accumulator) classifier
//! into a joint predictor of choices and reaction times: a trainable
//! evidence map feeds a threshold accumulator whose integer stopping step
//! carries a surrogate gradient, trainable either against reference RT
//! distributions or through a speed–accuracy self-penalty. Includes a
//! trainable multi-population attractor (Wong–Wang style) head for
//! feedforward classifiers, plus the oracles used to verify all of it.

pub mod backbone;
pub mod checkpoint;
pub mod diffcore;
pub mod fitting;
pub mod objectives;
pub mod reference;
pub mod rtify;
pub mod seed;
pub mod stimuli;
pub mod wongwang;
