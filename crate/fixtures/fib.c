/* Naive recursive Fibonacci of argv[1]. */
#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) unsigned long combine(unsigned long a, unsigned long b)
{
	return a + b;
}

__attribute__((noinline)) unsigned long fib(unsigned int n)
{
	if (n < 2)
		return n;
	return combine(fib(n - 1), fib(n - 2));
}

int main(int argc, char **argv)
{
	unsigned int n = argc > 1 ? (unsigned int)strtoul(argv[1], NULL, 10) : 10;

	printf("fib(%u)=%lu\n", n, fib(n));
	return 0;
}
