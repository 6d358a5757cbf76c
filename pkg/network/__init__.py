# heightmap-eds network module