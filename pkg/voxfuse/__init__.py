# voxfuse: sparse-voxel feature fusion and open-vocabulary 3D queries
__version__ = "1.0.0"
__description__ = "Lift dense 2D feature maps into a sparse voxel grid and query it with embeddings"
