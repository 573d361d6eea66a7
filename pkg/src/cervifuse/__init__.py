"""cervifuse: multi-backbone deep feature fusion for cell image classification.

The toolkit covers the whole experiment pipeline: dataset ingestion and
stratified splitting, two-stage augmentation (offline expansion plus online
per-epoch transforms), frozen trunk feature extraction, trainable
per-backbone heads, late fusion by majority vote, a hybrid feature fusion
classifier, and the evaluation/report stage.
"""

__version__ = "0.1.0"
