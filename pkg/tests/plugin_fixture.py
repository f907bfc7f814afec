"""A tiny stand-in for a pretrained model, loaded through the plugin adapter."""

import torch

from zsad.encoder import MockBackbone, mock_config, split_words


class TinyModel:
    def __init__(self, config):
        self.inner = MockBackbone(mock_config(patch_layers=config.patch_layers))

    def parameters(self):
        return self.inner.parameters()

    def encode_image_layers(self, images, layers):
        feats = {ell: self.inner.layer_patch_features(images, ell) for ell in layers}
        out = self.inner.encode_images(images)
        return (
            torch.stack([f.object_token for f in out]),
            torch.stack([f.spatial_token for f in out]),
            feats,
        )

    def tokenize(self, text):
        return [hash_id(w) for w in split_words(text)]

    def token_embedding(self, ids):
        return self.inner._vocab[ids]

    def encode_token_embeddings(self, rows):
        return self.inner._encode_rows(rows)


def hash_id(word):
    from zsad.encoder import _stable_hash

    return _stable_hash(word) % MockBackbone.vocab_size


def make(config):
    return TinyModel(config)
