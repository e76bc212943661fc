//! Default model recipes per benchmark: architecture strings, VAE targets, latent sizes.

use crate::arch::Nonlinearity;

/// Mask networks use ReLU6 in their downsampling half and leaky ReLU in the upsampling half.
pub const MASK_PLAN: [Nonlinearity; 2] = [Nonlinearity::Relu6, Nonlinearity::LeakyRelu];
pub const CLASSIFIER_PLAN: [Nonlinearity; 1] = [Nonlinearity::Relu6];
pub const VAE_PLAN: [Nonlinearity; 1] = [Nonlinearity::LeakyRelu];

/// Pixel-noise scale of the Gaussian reconstruction term, `(1/8)^(1/2)`.
pub const DEFAULT_SIGMA: f64 = 0.353_553_390_593_273_8;

#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub name: &'static str,
    /// `[height, width, channels]`.
    pub image_shape: [usize; 3],
    pub categories: usize,
    pub classifier: &'static str,
    pub mask: &'static str,
    pub encoder: &'static str,
    pub decoder: &'static str,
    pub latent_dim: usize,
    pub vae_target: f64,
    pub sigma: f64,
}

pub const MNIST_CLASSIFIER: &str =
    "C(1, 1, 4) -> C(3, 2, 4) -> C(1,1,8) -> C(3, 2, 8) -> C(1, 1, 16) -> C(3, 2, 16) -> Avg -> FC(2)";
pub const MNIST_MASK: &str = "[C(1, 1, 4) -> C(3, 2, 4) -> C(1, 1, 8) -> C(3, 2, 8)] -> \
     [Resize(12) -> C(1, 1, 16) -> Pad(1) -> Resize(28) -> C(1, 1, 16) -> C(1, 1, 1)]";
pub const MNIST_ENCODER: &str = "C(3, 2, 16) -> C(3, 2, 16) -> C(3,1,16)";
pub const MNIST_DECODER: &str =
    "FC(24) -> FC(49) -> Shape(7x7) -> T_s(3, 2, 16) -> T_s(3, 1, 16) -> T_s(3, 2, 16) -> C(1, 1, 2)";

pub const CIFAR_CLASSIFIER: &str = "C(1, 1, 8) -> C(3, 2, 16) -> C(1, 1, 16) -> C(3,2,32) -> \
     C(1,1,32) -> C(3,2,48) -> C(1,1,48) -> Avg -> FC(2)";
/// Published with the typo `C_s(3, 1 8)`, kept verbatim; the parser reads it as `C_s(3,1,8)`.
pub const CIFAR_MASK: &str = "[C(1, 1, 8) -> C(3, 2, 16) -> C(1, 1, 16) -> C(3,2,32)] -> \
     [C_s(3, 1, 16) -> Resize(10) -> C_s(3, 1, 16) -> Resize(16) -> C_s(3, 1, 8) -> Resize(32) -> \
     C_s(3, 1 8) -> C(1, 1, 1)]";
pub const CIFAR_ENCODER: &str = "C(3, 2, 8) -> C(3, 2, 8) -> C(3, 2, 16) -> C(3,1,16)";
pub const CIFAR_DECODER: &str = "FC(64) -> FC(128) -> Shape(8x8) -> T_s(3, 2, 16) -> T_s(3, 1, 16) -> \
     T_s(3, 2, 16) -> T_s(3, 1, 4)";

pub const MULTI_CLASSIFIER: &str = "C(1, 1, 4) -> C_s(3, 2, 4) -> C(1, 1, 8) -> C(3, 2, 8) -> \
     C(1,1,16) -> C(3,2,16) -> C(1,1,16) -> C(3,2,16) -> Avg -> FC(10)";
pub const MULTI_MASK: &str = "[C(1, 1, 4) -> C_s(3, 2, 4) -> C(1, 1, 8) -> C(3, 2, 8)] -> \
     [Resize(12) -> C_s(3, 1, 16) -> Pad(1) -> Resize(28) -> C_s(3, 1, 16) -> Resize(56) -> \
     C(1, 1, 16) -> C(1, 1, 1)";
pub const MULTI_ENCODER: &str = "C_s(3, 2, 16) -> C(3, 2, 16) -> C(3, 2, 16) -> C(3,1,8)";
pub const MULTI_DECODER: &str = "FC(24) -> FC(49) -> Shape(7x7) -> T_s(3, 2, 16) -> T_s(3, 1, 16) -> \
     T_s(3, 2, 8) -> T_s(3, 2, 4) -> C(1, 1, 2)";

/// The published classifier ends without an output head; `Avg -> FC(4)` is appended.
pub const SVHN_CLASSIFIER: &str = "C_s(3, 1, 4) -> C_s(3, 2, 4) -> C_s(3, 1, 4) -> C_s(3, 2, 4) -> \
     C_s(3, 1, 4) -> C_s(3, 2, 8) -> C_s(3, 1, 8) -> C_s(3, 2, 8) -> C_s(3, 1, 8) -> C_s(3, 2, 8) -> \
     Avg -> FC(4)";
/// The published string omits the layer name of the final `C(1, 1, 1)`.
pub const SVHN_MASK: &str = "[C_s(3, 1, 4) -> C_s(3, 2, 4) -> C(1, 1, 8) -> C(3, 2, 8)] -> \
     [C_s(3, 1, 8) -> C_s(5, 1, 8) -> Resize(16) -> C_s(5, 1, 8) -> C_s(5, 1, 8) -> Resize(32) -> \
     C_s(3, 1, 4) -> C(1, 1, 1) -> Resize(128)]";
pub const SVHN_ENCODER: &str = "C_s(3, 2, 8) -> C_s(3, 1, 8) -> C_s(3, 2, 16) -> C_s(3, 1, 16) -> \
     C_s(3, 2, 16) -> C_s(3, 1, 16) -> C_s(3, 2, 16) -> C_s(3, 2, 32) -> C_s(3, 1, 32)";
pub const SVHN_DECODER: &str = "FC(64) -> FC(128) -> Shape(8x8) -> T_s(3, 2, 16) -> T_s(3, 1, 16) -> \
     T_s(3, 2, 16) -> T_s(3, 1, 16) -> T_s(3, 2, 8) -> T_s(3, 1, 8) -> T_s(3, 2, 4)";

/// Anchor benchmark on a 40x40 canvas. The mask network downsamples three times so that
/// every output pixel sees the whole canvas, which is what lets a mask encode the label.
pub const ANCHORS_CLASSIFIER: &str =
    "C(1, 1, 4) -> C(3, 2, 4) -> C(1,1,8) -> C(3, 2, 8) -> C(1, 1, 16) -> C(3, 2, 16) -> Avg -> FC(5)";
pub const ANCHORS_MASK: &str = "[C(1, 1, 4) -> C(3, 2, 8) -> C(3, 2, 16) -> C(3, 2, 16)] -> \
     [Resize(8) -> C_s(3, 1, 16) -> Resize(20) -> C_s(3, 1, 16) -> Resize(40) -> C(1, 1, 16) -> C(1, 1, 1)]";
pub const ANCHORS_ENCODER: &str = MNIST_ENCODER;
pub const ANCHORS_DECODER: &str =
    "FC(24) -> FC(100) -> Shape(10x10) -> T_s(3, 2, 16) -> T_s(3, 1, 16) -> T_s(3, 2, 16) -> C(1, 1, 2)";

pub fn mnist_anomaly() -> Recipe {
    Recipe {
        name: "anomaly-mnist",
        image_shape: [28, 28, 1],
        categories: 2,
        classifier: MNIST_CLASSIFIER,
        mask: MNIST_MASK,
        encoder: MNIST_ENCODER,
        decoder: MNIST_DECODER,
        latent_dim: 24,
        vae_target: 12.0,
        sigma: DEFAULT_SIGMA,
    }
}

pub fn cifar_anomaly() -> Recipe {
    Recipe {
        name: "anomaly-cifar",
        image_shape: [32, 32, 3],
        categories: 2,
        classifier: CIFAR_CLASSIFIER,
        mask: CIFAR_MASK,
        encoder: CIFAR_ENCODER,
        decoder: CIFAR_DECODER,
        latent_dim: 64,
        vae_target: 25.0,
        sigma: DEFAULT_SIGMA,
    }
}

pub fn multidigit(digits: usize) -> Recipe {
    Recipe {
        name: if digits == 2 { "multidigit-2" } else { "multidigit-4" },
        image_shape: [56, 56, 1],
        categories: 10,
        classifier: MULTI_CLASSIFIER,
        mask: MULTI_MASK,
        encoder: MULTI_ENCODER,
        decoder: MULTI_DECODER,
        latent_dim: 24,
        vae_target: 50.0,
        sigma: DEFAULT_SIGMA,
    }
}

pub fn anchors() -> Recipe {
    Recipe {
        name: "anchors",
        image_shape: [40, 40, 1],
        categories: 5,
        classifier: ANCHORS_CLASSIFIER,
        mask: ANCHORS_MASK,
        encoder: ANCHORS_ENCODER,
        decoder: ANCHORS_DECODER,
        latent_dim: 24,
        vae_target: 20.0,
        sigma: DEFAULT_SIGMA,
    }
}

pub fn svhn() -> Recipe {
    Recipe {
        name: "svhn",
        image_shape: [128, 128, 3],
        categories: 4,
        classifier: SVHN_CLASSIFIER,
        mask: SVHN_MASK,
        encoder: SVHN_ENCODER,
        decoder: SVHN_DECODER,
        latent_dim: 64,
        vae_target: 2000.0,
        sigma: DEFAULT_SIGMA,
    }
}

/// Look up a recipe by dataset name.
pub fn by_name(name: &str) -> Option<Recipe> {
    match name {
        "anomaly-mnist" => Some(mnist_anomaly()),
        "anomaly-cifar" => Some(cifar_anomaly()),
        "multidigit-2" => Some(multidigit(2)),
        "multidigit-4" => Some(multidigit(4)),
        "anchors" | "anchors-noise" => Some(anchors()),
        "svhn" => Some(svhn()),
        _ => None,
    }
}
