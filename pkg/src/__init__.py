# TraDy sparse-backpropagation engine
