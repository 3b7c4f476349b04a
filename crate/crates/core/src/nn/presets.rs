//! Named classifier architectures.
//!
//! The MNIST victim CNN is described only as the adversary's network with
//! two convolutional layers followed by a softmax layer; the reading
//! shipped here keeps the pooling/dropout block and drops the dense-128
//! block. Swap in any other reading by building a `ModelSpec` directly.

use super::{Activation, LayerSpec, ModelSpec};

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units }
}

fn conv(filters: usize) -> LayerSpec {
    LayerSpec::Conv { filters, kernel: 3 }
}

fn act(a: Activation) -> LayerSpec {
    LayerSpec::Activation { activation: a }
}

/// FC-784-100-100-10, ReLU hidden layers, softmax output.
pub fn mnist_fc_victim() -> ModelSpec {
    ModelSpec {
        name: "mnist-fc-victim".into(),
        input_shape: vec![28, 28, 1],
        layers: vec![
            LayerSpec::Flatten,
            dense(100),
            act(Activation::Relu),
            dense(100),
            act(Activation::Relu),
            dense(10),
            act(Activation::Softmax),
        ],
    }
}

/// FC-784-200-100-100-10.
pub fn mnist_fc_adversary() -> ModelSpec {
    ModelSpec {
        name: "mnist-fc-adversary".into(),
        input_shape: vec![28, 28, 1],
        layers: vec![
            LayerSpec::Flatten,
            dense(200),
            act(Activation::Relu),
            dense(100),
            act(Activation::Relu),
            dense(100),
            act(Activation::Relu),
            dense(10),
            act(Activation::Softmax),
        ],
    }
}

/// Conv32-Conv64-pool-dropout, dense 128, softmax 10.
pub fn mnist_cnn_adversary() -> ModelSpec {
    ModelSpec {
        name: "mnist-cnn-adversary".into(),
        input_shape: vec![28, 28, 1],
        layers: vec![
            conv(32),
            act(Activation::Relu),
            conv(64),
            act(Activation::Relu),
            LayerSpec::MaxPool,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Flatten,
            dense(128),
            act(Activation::Relu),
            LayerSpec::Dropout { rate: 0.5 },
            dense(10),
            act(Activation::Softmax),
        ],
    }
}

/// Two convolutional layers straight into the softmax head.
pub fn mnist_cnn_victim() -> ModelSpec {
    ModelSpec {
        name: "mnist-cnn-victim".into(),
        input_shape: vec![28, 28, 1],
        layers: vec![
            conv(32),
            act(Activation::Relu),
            conv(64),
            act(Activation::Relu),
            LayerSpec::MaxPool,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Flatten,
            dense(10),
            act(Activation::Softmax),
        ],
    }
}

fn conv_elu_bn(filters: usize) -> [LayerSpec; 3] {
    [conv(filters), act(Activation::Elu), LayerSpec::BatchNorm]
}

/// Four double-blocks of (conv, ELU, batchnorm) with pooling/dropout,
/// softmax head.
pub fn cifar_cnn_victim() -> ModelSpec {
    let mut layers = Vec::new();
    for (filters, rate) in [(32, 0.2), (64, 0.3), (128, 0.4), (128, 0.4)] {
        layers.extend(conv_elu_bn(filters));
        layers.extend(conv_elu_bn(filters));
        layers.push(LayerSpec::MaxPool);
        layers.push(LayerSpec::Dropout { rate });
    }
    layers.push(LayerSpec::Flatten);
    layers.push(dense(10));
    layers.push(act(Activation::Softmax));
    ModelSpec {
        name: "cifar-cnn-victim".into(),
        input_shape: vec![32, 32, 3],
        layers,
    }
}

/// Insert one (conv z, ELU, batchnorm) sequence after the `after`-th
/// existing such sequence; `z` copies the preceding conv's filter count.
/// Errors if the spec has fewer sequences than `after`.
pub(crate) fn insert_conv_sequence(
    spec: &ModelSpec,
    after: usize,
    name: String,
) -> Option<ModelSpec> {
    let mut seen = 0;
    let mut insert_at = None;
    let mut z = 0;
    let mut i = 0;
    while i + 2 < spec.layers.len() {
        if let (
            LayerSpec::Conv { filters, .. },
            LayerSpec::Activation {
                activation: Activation::Elu,
            },
            LayerSpec::BatchNorm,
        ) = (&spec.layers[i], &spec.layers[i + 1], &spec.layers[i + 2])
        {
            seen += 1;
            if seen == after {
                insert_at = Some(i + 3);
                z = *filters;
                break;
            }
            i += 3;
        } else {
            i += 1;
        }
    }
    let insert_at = insert_at?;
    let mut layers = spec.layers.clone();
    let seq = conv_elu_bn(z);
    layers.splice(insert_at..insert_at, seq.into_iter());
    Some(ModelSpec {
        name,
        input_shape: spec.input_shape.clone(),
        layers,
    })
}

/// The victim architecture with an extra sequence after the eighth block.
pub fn cifar_cnn_adversary() -> ModelSpec {
    insert_conv_sequence(&cifar_cnn_victim(), 8, "cifar-cnn-adversary".into())
        .expect("victim preset has 8 sequences")
}

/// Defense-training variants: extra sequence after sequence 2, 4, or 6.
pub fn cifar_cnn_variant(after: usize) -> Option<ModelSpec> {
    if ![2, 4, 6].contains(&after) {
        return None;
    }
    insert_conv_sequence(
        &cifar_cnn_victim(),
        after,
        format!("cifar-cnn-variant-{after}"),
    )
}

/// Resolve a classifier preset by its CLI name.
pub fn classifier_preset(name: &str) -> Option<ModelSpec> {
    match name {
        "mnist-fc-victim" => Some(mnist_fc_victim()),
        "mnist-fc-adversary" => Some(mnist_fc_adversary()),
        "mnist-cnn-victim" => Some(mnist_cnn_victim()),
        "mnist-cnn-adversary" => Some(mnist_cnn_adversary()),
        "cifar-cnn-victim" => Some(cifar_cnn_victim()),
        "cifar-cnn-adversary" => Some(cifar_cnn_adversary()),
        "cifar-cnn-variant-2" => cifar_cnn_variant(2),
        "cifar-cnn-variant-4" => cifar_cnn_variant(4),
        "cifar-cnn-variant-6" => cifar_cnn_variant(6),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchType;

    #[test]
    fn all_presets_compose() {
        for name in [
            "mnist-fc-victim",
            "mnist-fc-adversary",
            "mnist-cnn-victim",
            "mnist-cnn-adversary",
            "cifar-cnn-victim",
            "cifar-cnn-adversary",
            "cifar-cnn-variant-2",
            "cifar-cnn-variant-4",
            "cifar-cnn-variant-6",
        ] {
            let spec = classifier_preset(name).unwrap();
            let out = spec.output_shape().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(out, vec![10], "{name}");
        }
    }

    #[test]
    fn arch_types() {
        assert_eq!(mnist_fc_victim().arch_type(), ArchType::Fc);
        assert_eq!(mnist_cnn_victim().arch_type(), ArchType::Cnn);
    }

    #[test]
    fn unknown_preset_is_none() {
        assert!(classifier_preset("nope").is_none());
    }
}
