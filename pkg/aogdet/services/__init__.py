# aogdet/services/__init__.py
"""
Domain services, one module per concern:
- imaging.py: image decoding, HOG pyramids, raw feature extractors
- features.py: joint feature vectors and leaf-edge responses
- serialization.py: AOGM model files
- inference.py: response maps, part placement, activation DP, greedy multiclass assembly
- clustering.py / grouping.py: ISODATA, size buckets, class grouping
- ssvm.py / dso.py / combine.py: training
- evaluation.py / datasets.py / synthetic.py: metrics, file formats, synthetic corpora
"""
